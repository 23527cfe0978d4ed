#include "vifeedit/checks.hpp"

#include "vifeedit/eval.hpp"
#include "vifeedit/gradcheck.hpp"
#include "vifeedit/trainer.hpp"

#include <cmath>
#include <random>
#include <set>
#include <sstream>

namespace vifeedit {

namespace {

template <typename Scalar>
Tensor<Scalar> gaussian(Shape shape, std::mt19937_64& rng, double stddev = 1.0) {
  std::normal_distribution<double> nd(0.0, stddev);
  Tensor<Scalar> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(nd(rng));
  return t;
}

Video uniform_video(Shape shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Video v(std::move(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = u(rng);
  return v;
}

int rank_for(const ModelConfig& c) { return std::min(kDefaultRank, c.dim); }

int canvas_for(const ModelConfig& c) { return 32 % c.patch == 0 ? 32 : 4 * c.patch; }

template <typename Scalar>
void randomize_ups(AdapterParams<Scalar>& adapter, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> nd(0.0, stddev);
  for (auto& nd_delta : trainable_parameters(adapter)) {
    auto& up = nd_delta.delta->up.value;
    for (Index i = 0; i < up.size(); ++i) up[i] = static_cast<Scalar>(nd(rng));
  }
}

CheckResult result(std::string name, bool ok, std::string detail) { return {std::move(name), ok, std::move(detail)}; }

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(3);
  s << v;
  return s.str();
}

}  // namespace

CheckResult check_init_identity(const ModelConfig& config, int triples, std::uint64_t seed, const CheckHooks& hooks) {
  EditModel m = make_model(config, Method::vifeedit, rank_for(config), seed, seed + 1);
  if (hooks.nonzero_lora_up) m.adapter.blocks[0].spatial.pos[0].up.value[0] = 0.05f;
  std::mt19937_64 rng(seed + 2);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  const Index side = canvas_for(config) / config.patch;
  double worst = 0.0;  // max of |adapted - base| / (1 + |base|)
  for (int i = 0; i < triples; ++i) {
    const GridGeometry geo{1 + i % 3, side, side};
    const Tensor<float> z = gaussian<float>({1, geo.tokens(), config.patch_dim()}, rng);
    const Tensor<float> c = gaussian<float>({1, geo.tokens(), config.patch_dim()}, rng);
    const double t[1] = {uniform(rng)};
    const int tasks[1] = {static_cast<int>(rng() % static_cast<std::uint64_t>(config.num_tasks))};
    Graph<float> g(false);
    const Tensor<float> base = forward_velocity(g, m.base, z, geo, tasks, t).value();
    const Tensor<float> adapted = m.velocity(g, z, c, geo, tasks, t).value();
    const Eigen::ArrayXd b = base.data().cast<double>(), a = adapted.data().cast<double>();
    worst = std::max(worst, ((a - b).abs() / (1.0 + b.abs())).maxCoeff());
  }
  return result("init-identity", worst <= 1e-6,
                std::to_string(triples) + " triples, max |adapted-base|/(1+|base|) = " + fmt(worst) +
                    " (limit 1e-06)");
}

CheckResult check_frame_isolation(const ModelConfig& config, std::uint64_t seed) {
  auto base = init_backbone<float>(config, seed);
  auto adapter = init_adapter(base, rank_for(config), seed + 1);
  std::mt19937_64 rng(seed + 2);
  randomize_ups(adapter, rng, 0.1);
  const GridGeometry geo{3, 3, 3};
  const Index frame = geo.rows * geo.cols * config.dim;
  const auto angles = rope3d_angles<float>(spatial_positions(geo.frames, geo.rows, geo.cols), config.head_dim(),
                                           config.rope_theta);
  const Tensor<float> z0 = gaussian<float>({2, geo.tokens(), config.dim}, rng);
  const Tensor<float> c0 = gaussian<float>({2, geo.tokens(), config.dim}, rng);
  auto run = [&](const Tensor<float>& z, const Tensor<float>& c, BranchSign sign) {
    Graph<float> g(false);
    auto [oz, oc] = spatial_branch_forward(g.constant(z), g.constant(c), geo, adapter.blocks[0].spatial, sign,
                                           angles, config.heads);
    return std::make_pair(oz.value(), oc.value());
  };
  int violations = 0;
  for (BranchSign sign : {BranchSign::pos, BranchSign::neg}) {
    const auto [rz, rc] = run(z0, c0, sign);
    for (int which = 0; which < 2; ++which) {
      for (Index j = 0; j < geo.frames; ++j) {
        Tensor<float> z1 = z0, c1 = c0;
        Tensor<float>& touched = which == 0 ? z1 : c1;
        for (Index b = 0; b < 2; ++b) {
          for (Index i = 0; i < frame; ++i) touched[b * geo.tokens() * config.dim + j * frame + i] += 0.5f;
        }
        const auto [oz, oc] = run(z1, c1, sign);
        for (Index b = 0; b < 2; ++b) {
          for (Index f = 0; f < geo.frames; ++f) {
            const Index off = b * geo.tokens() * config.dim + f * frame;
            const bool same = (oz.data().segment(off, frame) == rz.data().segment(off, frame)).all() &&
                              (oc.data().segment(off, frame) == rc.data().segment(off, frame)).all();
            if (same != (f != j)) ++violations;
          }
        }
      }
    }
  }
  return result("per-frame-isolation", violations == 0,
                std::to_string(violations) + " frame(s) violated isolation over 12 perturbations");
}

CheckResult check_path_exclusivity(const ModelConfig& config, std::uint64_t seed) {
  EditModel m = make_model(config, Method::vifeedit, rank_for(config), seed, seed + 1);
  std::mt19937_64 rng(seed + 2);
  randomize_ups(m.adapter, rng, 0.1);
  const GridGeometry geo{2, 2, 2};
  const Tensor<float> z = gaussian<float>({2, geo.tokens(), config.patch_dim()}, rng);
  const double t[2] = {0.3, 0.8};
  const int tasks[2] = {0, 0};
  DualPathOptions<float> off;
  off.spatial_branches = false;
  Tensor<float> reference;
  bool identical = true, branches_matter = false;
  for (int k = 0; k < 4; ++k) {
    const Tensor<float> c = gaussian<float>(z.shape(), rng, 1.0 + k);
    Graph<float> g(false);
    const Tensor<float> out = m.velocity(g, z, c, geo, tasks, t, off).value();
    if (k == 0) reference = out;
    else identical = identical && out.bit_equal(reference);
    branches_matter = branches_matter || !m.velocity(g, z, c, geo, tasks, t).value().bit_equal(out);
  }
  return result("condition-path-exclusivity", identical && branches_matter,
                std::string(identical ? "z stream bit-identical" : "z stream changed") + " across 4 conditions" +
                    (branches_matter ? "" : "; enabled branches had no effect"));
}

CheckResult check_c_timestep(const ModelConfig& config, int steps, std::uint64_t seed) {
  EditModel m = make_model(config, Method::vifeedit, rank_for(config), seed, seed + 1);
  std::mt19937_64 rng(seed + 2);
  randomize_ups(m.adapter, rng, 0.1);
  const int side = canvas_for(config);
  const Video src = uniform_video({2, side, side, config.channels}, rng);
  SampleConfig sc;
  sc.steps = steps;
  sc.seed = seed;
  EditProbe probe;
  edit_video(src, 0, m, sc, &probe);
  const Tensor<float> zero = timestep_embed(m.base, 0.0);
  int mismatched = 0;
  for (const auto& row : probe.c_time) mismatched += row.reshaped(zero.shape()).bit_equal(zero) ? 0 : 1;
  const bool ok = static_cast<int>(probe.c_time.size()) == steps && mismatched == 0;
  return result("c-stream-timestep-zero", ok,
                std::to_string(probe.c_time.size()) + " steps probed, " + std::to_string(mismatched) +
                    " differ from timestep_embed(0)");
}

CheckResult check_spatial_positions(Index frames, Index h, Index w) {
  const auto pos = spatial_positions(frames, h, w);
  bool ok = static_cast<Index>(pos.size()) == 2 * h * w;
  std::set<Index> ws;
  for (std::size_t i = 0; i < pos.size(); ++i) {
    const Index half = static_cast<Index>(i) / (h * w), local = static_cast<Index>(i) % (h * w);
    ok = ok && pos[i].t == 0 && pos[i].h == local / w && pos[i].w == half * w + local % w;
    ws.insert(pos[i].w);
  }
  ok = ok && static_cast<Index>(ws.size()) == 2 * w && *ws.begin() == 0 && *ws.rbegin() == 2 * w - 1;
  return result("spatial-positions", ok,
                "w indices " + std::to_string(ws.size()) + " distinct in [0, " + std::to_string(2 * w) +
                    "), temporal index 0");
}

CheckResult check_frozen_base(const ModelConfig& config, int steps, int batch_size, std::uint64_t seed,
                              const CheckHooks& hooks) {
  EditModel m = make_model(config, Method::vifeedit, rank_for(config), seed, seed + 1);
  if (hooks.unfreeze_base) m.base.blocks[0].attn.q_weight.trainable = true;
  const auto guarded = m.protected_params();
  std::vector<Tensor<float>> before;
  for (auto* p : guarded) before.push_back(p->value);
  const int side = canvas_for(config);
  std::vector<TrainingPair> data;
  for (int i = 0; i < batch_size * 4; ++i) {
    const VideoPair vp = apply_edit_oracle(
        random_scene(ChannelPermute{}, scene_seed(seed, static_cast<std::uint64_t>(i), SeedDomain::train), 1, side,
                     side),
        ChannelPermute{});
    data.push_back({vp.source, vp.target, 0});
  }
  TrainConfig tc;
  tc.rank = rank_for(config);
  tc.batch_size = batch_size;
  tc.seed = seed;
  TrainState st = init_train_state(m, tc);
  const std::span<const TrainingPair> all(data);
  for (int s = 0; s < steps; ++s) {
    train_step(all.subspan(static_cast<std::size_t>((s % 4) * batch_size), static_cast<std::size_t>(batch_size)),
               m, st, tc);
  }
  std::string changed;
  int n_changed = 0;
  for (std::size_t i = 0; i < guarded.size(); ++i) {
    if (!guarded[i]->value.bit_equal(before[i])) {
      if (changed.empty()) changed = guarded[i]->name;
      ++n_changed;
    }
  }
  return result("frozen-base", n_changed == 0,
                std::to_string(guarded.size()) + " protected tensors after " + std::to_string(steps) + " steps, " +
                    std::to_string(n_changed) + " changed" + (changed.empty() ? "" : " (first: " + changed + ")"));
}

CheckResult check_gradient(int blocks, int dim, int probes, double tolerance, std::uint64_t seed) {
  ModelConfig cfg;
  cfg.blocks = blocks;
  cfg.dim = dim;
  cfg.heads = 1;
  cfg.time_dim = 8;
  cfg.ffn_hidden = 2 * dim;
  cfg.patch = 2;
  cfg.num_tasks = 2;
  auto base = init_backbone<double>(cfg, seed);
  auto adapter = init_adapter(base, 4, seed + 1);
  std::mt19937_64 rng(seed + 2);
  randomize_ups(adapter, rng, 0.1);
  const GridGeometry geo{2, 2, 2};
  const Shape shape{2, geo.tokens(), cfg.patch_dim()};
  const Tensor<double> c = gaussian<double>(shape, rng);
  const Tensor<double> z0 = gaussian<double>(shape, rng), eps = gaussian<double>(shape, rng);
  const std::vector<double> t{0.35, 0.8};
  Tensor<double> zt(shape), vt(shape);
  const Index per = zt.size() / 2;
  for (Index b = 0; b < 2; ++b) {
    const Shape one{per};
    const auto fs = noisy_interpolate(Tensor<double>(one, z0.data().segment(b * per, per)),
                                      Tensor<double>(one, eps.data().segment(b * per, per)), t[b]);
    zt.data().segment(b * per, per) = fs.zt.data();
    vt.data().segment(b * per, per) = fs.vt.data();
  }
  const int tasks[2] = {0, 1};
  auto params = trainable_params(adapter);
  const ScalarFn fn = [&](Graph<double>& g) {
    return fm_loss(adapted_forward_velocity(g, base, adapter, zt, c, geo, tasks, t), g.constant(vt));
  };
  const GradCheckResult r = finite_diff_check(fn, std::span(params), probes, 1e-5, seed + 3);
  const bool ok = r.probes >= probes && r.max_rel_error <= tolerance;
  return result("gradient", ok,
                std::to_string(blocks) + "-block d=" + std::to_string(dim) + " model, " + std::to_string(r.probes) +
                    " probes, max rel err " + fmt(r.max_rel_error) + " (limit " + fmt(tolerance) + ")" +
                    (r.skipped.empty() ? "" : ", " + std::to_string(r.skipped.size()) + " kinks skipped"));
}

CheckResult check_round_trips(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::string> failed;
  const Video v = uniform_video({3, 4, 5, 3}, rng);
  if (!decode_vvf(encode_vvf(v)).bit_equal(v)) failed.push_back("vvf");

  ModelConfig cfg;
  cfg.blocks = 1;
  cfg.dim = 16;
  cfg.heads = 2;
  cfg.time_dim = 8;
  cfg.ffn_hidden = 16;
  EditModel m = make_model(cfg, Method::vifeedit, 4, seed, seed + 1);
  const std::string bytes = encode_checkpoint(model_checkpoint(m, nullptr));
  EditModel back = load_model(decode_checkpoint(bytes));
  if (encode_checkpoint(model_checkpoint(back, nullptr)) != bytes) failed.push_back("checkpoint");

  Report rep;
  rep.videos.push_back({"00000", 0, 23.25, 0.0047, 0.0, 0.97, 0.001, ""});
  rep.videos.push_back({"00001", 2, 1.0 / 3.0, 0.5, 1.0, 0.0, std::nullopt, "failed"});
  rep.rows = aggregate(rep.videos);
  if (Report::from_json(nlohmann::json::parse(rep.to_json().dump())).to_json() != rep.to_json()) {
    failed.push_back("report");
  }
  std::string detail = "vvf, checkpoint, report";
  if (!failed.empty()) {
    detail = "failed:";
    for (const auto& f : failed) detail += " " + f;
  }
  return result("format-round-trips", failed.empty(), detail);
}

CheckResult check_alpha_zero(const ModelConfig& config, std::uint64_t seed) {
  EditModel m = make_model(config, Method::vifeedit, rank_for(config), seed, seed + 1);
  std::mt19937_64 rng(seed + 2);
  const int side = canvas_for(config);
  const Video src = uniform_video({4, side, side, config.channels}, rng);
  SampleConfig sc;
  sc.alpha = 0.0;
  const bool ok = edit_video(src, 0, m, sc).bit_equal(src);
  return result("alpha-zero-identity", ok, ok ? "output bit-identical to source" : "output differs from source");
}

std::vector<CheckResult> run_selftest(const CheckHooks& hooks) {
  ModelConfig micro;
  micro.blocks = 2;
  micro.dim = 24;
  micro.heads = 2;
  micro.time_dim = 8;
  micro.ffn_hidden = 48;
  micro.num_tasks = 3;
  std::vector<CheckResult> out;
  auto guarded = [&](const std::string& name, auto&& fn) {
    try {
      out.push_back(fn());
    } catch (const std::exception& e) {
      out.push_back(result(name, false, std::string("threw: ") + e.what()));
    }
  };
  guarded("init-identity", [&] { return check_init_identity(micro, 16, 1, hooks); });
  guarded("per-frame-isolation", [&] { return check_frame_isolation(micro, 2); });
  guarded("condition-path-exclusivity", [&] { return check_path_exclusivity(micro, 3); });
  guarded("c-stream-timestep-zero", [&] { return check_c_timestep(micro, 5, 4); });
  guarded("spatial-positions", [&] { return check_spatial_positions(3, 4, 4); });
  guarded("frozen-base", [&] { return check_frozen_base(micro, 20, 2, 5, hooks); });
  guarded("gradient", [&] { return check_gradient(2, 16, 64, 1e-4, 6); });
  guarded("format-round-trips", [&] { return check_round_trips(7); });
  guarded("alpha-zero-identity", [&] { return check_alpha_zero(micro, 8); });
  return out;
}

}  // namespace vifeedit
