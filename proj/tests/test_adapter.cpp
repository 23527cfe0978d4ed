#include "test_util.hpp"
#include "vifeedit/adapter.hpp"
#include "vifeedit/gradcheck.hpp"

#include <doctest.h>

#include <cmath>

using namespace vifeedit;
using vifeedit::testing::random_tensor;

namespace {

ModelConfig micro_config(int dim = 24, int heads = 2, int blocks = 2) {
  ModelConfig c;
  c.blocks = blocks;
  c.dim = dim;
  c.heads = heads;
  c.time_dim = 8;
  c.ffn_hidden = 2 * dim;
  c.patch = 2;
  c.num_tasks = 3;
  c.max_frames = 4;
  return c;
}

template <typename Scalar>
void randomize_ups(AdapterParams<Scalar>& a, std::uint64_t seed, double stddev = 0.05) {
  for (auto& nd : trainable_parameters(a)) {
    nd.delta->up.value = random_tensor<Scalar>(nd.delta->up.value.shape(), seed++, stddev);
  }
}

struct Inputs {
  GridGeometry geo{2, 2, 2};
  Tensor<double> z, c;
  std::vector<int> tasks{0, 2};
  std::vector<double> t{0.3, 0.8};
};

Inputs make_inputs(const ModelConfig& cfg, std::uint64_t seed) {
  Inputs in;
  in.z = random_tensor<double>({2, in.geo.tokens(), cfg.patch_dim()}, seed);
  in.c = random_tensor<double>({2, in.geo.tokens(), cfg.patch_dim()}, seed + 1);
  return in;
}

}  // namespace

TEST_CASE("the freshly initialized adapter leaves the backbone unchanged") {
  const auto cfg = micro_config();
  auto base = init_backbone<double>(cfg, 1);
  auto adapter = init_adapter(base, 4, 2);
  for (int trial = 0; trial < 4; ++trial) {
    const auto in = make_inputs(cfg, 10 + 2 * trial);
    Graph<double> ga(false), gb(false);
    const auto adapted =
        adapted_forward_velocity(ga, base, adapter, in.z, in.c, in.geo, in.tasks, in.t).value();
    const auto plain = forward_velocity(gb, base, in.z, in.geo, in.tasks, in.t).value();
    const auto tol = 1e-12 * (1.0 + plain.data().abs());
    CHECK(((adapted.data() - plain.data()).abs() <= tol).all());
  }
}

TEST_CASE("positive and negative branches agree bit for bit at init") {
  const auto cfg = micro_config();
  auto base = init_backbone<double>(cfg, 1);
  auto adapter = init_adapter(base, 4, 2);
  const GridGeometry geo{2, 2, 2};
  Graph<double> g(false);
  auto hz = g.constant(random_tensor<double>({1, geo.tokens(), cfg.dim}, 3));
  auto hc = g.constant(random_tensor<double>({1, geo.tokens(), cfg.dim}, 4));
  const auto angles = rope3d_angles<double>(spatial_positions(2, 2, 2), cfg.head_dim());
  auto& sp = adapter.blocks[0].spatial;
  const auto [pz, pc] = spatial_branch_forward(hz, hc, geo, sp, BranchSign::pos, angles, cfg.heads);
  const auto [nz, nc] = spatial_branch_forward(hz, hc, geo, sp, BranchSign::neg, angles, cfg.heads);
  CHECK(pz.value().bit_equal(nz.value()));
  CHECK(pc.value().bit_equal(nc.value()));
  CHECK_FALSE(sp.pos[0].down.value.bit_equal(sp.neg[0].down.value));
}

TEST_CASE("adapter parameters are named, frozen where required and counted") {
  ModelConfig cfg;  // reference geometry
  auto base = init_backbone<float>(cfg, 1);
  auto adapter = init_adapter(base, kDefaultRank, 2);
  const auto named = trainable_parameters(adapter);
  REQUIRE(named.size() == 40);
  CHECK(named[0].name == "blocks.0.spa_pos.q");
  CHECK(named[7].name == "blocks.0.spa_neg.o");
  CHECK(named[9].name == "blocks.0.ffn.2");
  CHECK(named[39].name == "blocks.3.ffn.2");
  Index elements = 0;
  for (const auto& nd : named) {
    elements += nd.delta->element_count();
    CHECK(nd.delta->up.value.data().abs().maxCoeff() == 0.0f);
    CHECK(nd.delta->down.trainable);
    CHECK(nd.delta->scaling == 1.0);
  }
  // 8 attention deltas of 2*32*128 plus ffn deltas of 32*(128+512), twice, per block.
  CHECK(elements == 4 * (8 * 2 * 32 * 128 + 2 * 32 * (128 + 512)));
  CHECK(trainable_params(adapter).size() == 80);

  const auto& fr = adapter.blocks[2].spatial.frozen;
  CHECK(fr.v_weight.name == "blocks.2.spatial.v.weight");
  CHECK(fr.v_weight.role == ParamRole::frozen_copy);
  CHECK_FALSE(fr.v_weight.trainable);
  CHECK(fr.v_weight.value.bit_equal(base.blocks[2].attn.v_weight.value));

  double sq = 0.0;
  Index n = 0;
  for (const auto& nd : named) {
    sq += nd.delta->down.value.data().template cast<double>().square().sum();
    n += nd.delta->down.value.size();
  }
  CHECK(std::sqrt(sq / double(n)) == doctest::Approx(kLoraDownStd).epsilon(0.02));
}

TEST_CASE("init_adapter validates the rank") {
  auto base = init_backbone<float>(micro_config(), 1);
  CHECK_THROWS_AS(init_adapter(base, 0, 1), std::invalid_argument);
  CHECK_THROWS_AS(init_adapter(base, 25, 1), std::invalid_argument);
  CHECK_NOTHROW(init_adapter(base, 24, 1));
}

TEST_CASE("spatial positions cover [0, 2w) at temporal index 0") {
  const auto pos = spatial_positions(5, 3, 4);
  REQUIRE(pos.size() == 24);
  for (std::size_t i = 0; i < pos.size(); ++i) {
    CHECK(pos[i].t == 0);
    const Index half = Index(i) / 12;
    CHECK(pos[i].h == (Index(i) % 12) / 4);
    CHECK(pos[i].w == half * 4 + Index(i) % 4);
  }
}

TEST_CASE("spatial branches are isolated per frame") {
  const auto cfg = micro_config();
  auto base = init_backbone<double>(cfg, 1);
  auto adapter = init_adapter(base, 4, 2);
  randomize_ups(adapter, 50);
  const GridGeometry geo{3, 2, 2};
  const Index hw = 4, d = cfg.dim;
  const auto angles = rope3d_angles<double>(spatial_positions(3, 2, 2), cfg.head_dim());
  const auto z0 = random_tensor<double>({1, geo.tokens(), d}, 5);
  const auto c0 = random_tensor<double>({1, geo.tokens(), d}, 6);
  auto run = [&](const Tensor<double>& z, const Tensor<double>& c) {
    Graph<double> g(false);
    auto [oz, oc] = spatial_branch_forward(g.constant(z), g.constant(c), geo, adapter.blocks[0].spatial,
                                           BranchSign::pos, angles, cfg.heads);
    return std::make_pair(oz.value(), oc.value());
  };
  const auto [rz, rc] = run(z0, c0);
  for (int which = 0; which < 2; ++which) {
    auto z1 = z0, c1 = c0;
    auto& target = which == 0 ? z1 : c1;
    for (Index i = 0; i < hw * d; ++i) target[hw * d + i] += 0.5;  // frame 1 only
    const auto [oz, oc] = run(z1, c1);
    for (Index f = 0; f < 3; ++f) {
      const Index off = f * hw * d;
      const bool same_z = (oz.data().segment(off, hw * d) == rz.data().segment(off, hw * d)).all();
      const bool same_c = (oc.data().segment(off, hw * d) == rc.data().segment(off, hw * d)).all();
      CHECK(same_z == (f != 1));
      CHECK(same_c == (f != 1));
    }
  }
}

TEST_CASE("without spatial branches the z stream ignores the condition") {
  const auto cfg = micro_config();
  auto base = init_backbone<double>(cfg, 1);
  auto adapter = init_adapter(base, 4, 2);
  randomize_ups(adapter, 60);
  const auto in = make_inputs(cfg, 20);
  const auto other_c = random_tensor<double>(in.c.shape(), 99, 3.0);
  auto run = [&](const Tensor<double>& c, bool spatial) {
    Graph<double> g(false);
    DualPathOptions<double> opt;
    opt.spatial_branches = spatial;
    return adapted_forward_velocity(g, base, adapter, in.z, c, in.geo, in.tasks, in.t, opt).value();
  };
  CHECK(run(in.c, false).bit_equal(run(other_c, false)));
  CHECK(run(in.c, true).max_abs_diff(run(other_c, true)) > 1e-6);
}

TEST_CASE("the condition stream is always embedded at t = 0") {
  const auto cfg = micro_config();
  auto base = init_backbone<double>(cfg, 1);
  auto adapter = init_adapter(base, 4, 2);
  const auto in = make_inputs(cfg, 30);
  std::vector<Tensor<double>> c_probe, z_probe;
  DualPathOptions<double> opt;
  opt.c_time_probe = &c_probe;
  opt.z_time_probe = &z_probe;
  Graph<double> g(false);
  adapted_forward_velocity(g, base, adapter, in.z, in.c, in.geo, in.tasks, in.t, opt);
  const auto t0 = timestep_embed(base, 0.0);
  REQUIRE(c_probe.size() == 2);
  for (const auto& row : c_probe) CHECK(row.bit_equal(t0));
  REQUIRE(z_probe.size() == 2);
  CHECK(z_probe[0].bit_equal(timestep_embed(base, 0.3)));
  CHECK(z_probe[1].bit_equal(timestep_embed(base, 0.8)));
  CHECK_FALSE(z_probe[0].bit_equal(t0));
}

TEST_CASE("two-token spatial branch matches a hand computation") {
  // One frame of one patch: the branch attends over exactly [z, c].
  const int d = 6;
  std::mt19937_64 rng(7);
  SpatialBranchParams<double> br;
  auto w = [&](std::uint64_t s, Shape shape) { return Param<double>("w", random_tensor<double>(shape, s, 0.5), false, ParamRole::frozen_copy); };
  br.frozen.q_weight = w(1, {d, d});
  br.frozen.q_bias = w(2, {d});
  br.frozen.k_weight = w(3, {d, d});
  br.frozen.k_bias = w(4, {d});
  br.frozen.v_weight = w(5, {d, d});
  br.frozen.v_bias = w(6, {d});
  br.frozen.o_weight = w(7, {d, d});
  br.frozen.o_bias = w(8, {d});
  for (int i = 0; i < 4; ++i) {
    br.pos[i] = make_lora<double>("pos", d, d, 2, rng);
    br.pos[i].up.value = random_tensor<double>({d, 2}, 20 + i, 0.3);
    br.neg[i] = make_lora<double>("neg", d, d, 2, rng);
  }
  const GridGeometry geo{1, 1, 1};
  const auto z = random_tensor<double>({1, 1, d}, 30);
  const auto c = random_tensor<double>({1, 1, d}, 31);
  Graph<double> g(false);
  const auto angles = rope3d_angles<double>(spatial_positions(1, 1, 1), d);
  const auto [oz, oc] =
      spatial_branch_forward(g.constant(z), g.constant(c), geo, br, BranchSign::pos, angles, 1);

  using Mat = Eigen::MatrixXd;
  auto m = [](const Tensor<double>& t, Index r, Index cc) {
    Mat out(r, cc);
    for (Index i = 0; i < r; ++i)
      for (Index j = 0; j < cc; ++j) out(i, j) = t[i * cc + j];
    return out;
  };
  Mat x(2, d);
  x.row(0) = m(z, 1, d);
  x.row(1) = m(c, 1, d);
  auto proj = [&](int i, const Param<double>& wt, const Param<double>& b, const Mat& in) {
    const Mat weff = m(wt.value, d, d) + m(br.pos[i].up.value, d, 2) * m(br.pos[i].down.value, 2, d);
    Mat y = in * weff.transpose();
    for (Index r = 0; r < y.rows(); ++r) y.row(r) += m(b.value, 1, d);
    return y;
  };
  Mat q = proj(0, br.frozen.q_weight, br.frozen.q_bias, x);
  Mat k = proj(1, br.frozen.k_weight, br.frozen.k_bias, x);
  const Mat v = proj(2, br.frozen.v_weight, br.frozen.v_bias, x);
  // Token 0 sits at w = 0 (no rotation); token 1 at w = 1 rotates channels (4, 5) by 1 rad.
  for (Mat* a : {&q, &k}) {
    const double u = (*a)(1, 4), vv = (*a)(1, 5);
    (*a)(1, 4) = u * std::cos(1.0) - vv * std::sin(1.0);
    (*a)(1, 5) = u * std::sin(1.0) + vv * std::cos(1.0);
  }
  Mat attn(2, d);
  for (int i = 0; i < 2; ++i) {
    const double s0 = q.row(i).dot(k.row(0)) / std::sqrt(double(d));
    const double s1 = q.row(i).dot(k.row(1)) / std::sqrt(double(d));
    const double mx = std::max(s0, s1);
    const double e0 = std::exp(s0 - mx), e1 = std::exp(s1 - mx);
    attn.row(i) = (e0 * v.row(0) + e1 * v.row(1)) / (e0 + e1);
  }
  const Mat out = proj(3, br.frozen.o_weight, br.frozen.o_bias, attn);
  for (Index j = 0; j < d; ++j) {
    CHECK(oz.value()[j] == doctest::Approx(out(0, j)).epsilon(1e-12));
    CHECK(oc.value()[j] == doctest::Approx(out(1, j)).epsilon(1e-12));
  }
}

TEST_CASE("adapted forward rejects inconsistent streams") {
  const auto cfg = micro_config();
  auto base = init_backbone<double>(cfg, 1);
  auto adapter = init_adapter(base, 4, 2);
  auto in = make_inputs(cfg, 40);
  Graph<double> g(false);
  const auto short_c = random_tensor<double>({2, 4, cfg.patch_dim()}, 1);
  CHECK_THROWS_AS(adapted_forward_velocity(g, base, adapter, in.z, short_c, in.geo, in.tasks, in.t),
                  ShapeError);
  const GridGeometry tall{5, 1, 1};
  const auto z5 = random_tensor<double>({2, 5, cfg.patch_dim()}, 2);
  CHECK_THROWS_AS(adapted_forward_velocity(g, base, adapter, z5, z5, tall, in.tasks, in.t),
                  std::invalid_argument);
}

TEST_CASE("adapted flow-matching loss gradient matches finite differences") {
  const auto cfg = micro_config(16, 1, 2);
  auto base = init_backbone<double>(cfg, 3);
  auto adapter = init_adapter(base, 4, 4);
  randomize_ups(adapter, 70, 0.1);
  auto params = trainable_params(adapter);
  const auto in = make_inputs(cfg, 50);
  const auto target = random_tensor<double>(in.z.shape(), 52);
  auto fn = [&](Graph<double>& g) {
    return mse(adapted_forward_velocity(g, base, adapter, in.z, in.c, in.geo, in.tasks, in.t),
               g.constant(target));
  };
  const auto r = finite_diff_check(fn, std::span(params), 64, 1e-5, 9);
  CHECK(r.probes == 64);
  CHECK(r.max_rel_error <= 1e-4);
}

TEST_CASE("direct tuning unfreezes attention and feed-forward weights only") {
  const auto cfg = micro_config();
  auto base = init_backbone<double>(cfg, 1);
  const auto trainable = direct_tuning_params(base);
  CHECK(trainable.size() == 2 * 12);
  CHECK(base.blocks[0].attn.q_weight.trainable);
  CHECK(base.blocks[1].ffn2_bias.trainable);
  CHECK_FALSE(base.blocks[0].modulation_weight.trainable);
  CHECK_FALSE(base.patch_weight.trainable);

  const auto in = make_inputs(cfg, 60);
  Graph<double> g(false);
  const auto out = direct_forward_velocity(g, base, in.z, in.c, in.geo, in.tasks, in.t).value();
  CHECK(out.shape() == in.z.shape());
  Graph<double> g2(false);
  const auto other = random_tensor<double>(in.c.shape(), 161);
  CHECK(direct_forward_velocity(g2, base, in.z, other, in.geo, in.tasks, in.t).value().max_abs_diff(out) >
        1e-6);
}

TEST_CASE("direct tuning gradient matches finite differences") {
  const auto cfg = micro_config(16, 1, 2);
  auto base = init_backbone<double>(cfg, 3);
  auto params = direct_tuning_params(base);
  const auto in = make_inputs(cfg, 70);
  const auto target = random_tensor<double>(in.z.shape(), 72);
  auto fn = [&](Graph<double>& g) {
    return mse(direct_forward_velocity(g, base, in.z, in.c, in.geo, in.tasks, in.t), g.constant(target));
  };
  const auto r = finite_diff_check(fn, std::span(params), 32, 1e-5, 11);
  CHECK(r.max_rel_error <= 1e-4);
}
