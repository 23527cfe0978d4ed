#include "vifeedit/eval.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

using namespace vifeedit;
namespace fs = std::filesystem;

namespace {

Video random_video(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Video v(std::move(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = u(rng);
  return v;
}

Video constant_video(Shape shape, float value) {
  Video v(std::move(shape));
  v.data().setConstant(value);
  return v;
}

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("vifeedit_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("psnr cap and unit-range extremes") {
  const Video v = random_video({2, 4, 4, 3}, 1);
  CHECK(psnr(v, v) == kPsnrCap);
  const Video zeros = constant_video({2, 4, 4, 3}, 0.0f), ones = constant_video({2, 4, 4, 3}, 1.0f);
  CHECK(mse(zeros, ones) == 1.0);
  CHECK(psnr(zeros, ones) == 0.0);
  CHECK_THROWS_AS(mse(zeros, constant_video({1, 4, 4, 3}, 0.0f)), ShapeError);
}

TEST_CASE("mse matches a long-double oracle and is symmetric") {
  const Video a = random_video({3, 5, 5, 3}, 2), b = random_video({3, 5, 5, 3}, 3);
  long double oracle = 0.0L;
  for (Index i = 0; i < a.size(); ++i) {
    const long double d = static_cast<long double>(a[i]) - static_cast<long double>(b[i]);
    oracle += d * d;
  }
  oracle /= static_cast<long double>(a.size());
  CHECK(std::abs(mse(a, b) - static_cast<double>(oracle)) <= 1e-6 * static_cast<double>(oracle));
  CHECK(mse(a, b) == mse(b, a));
  const double expected_psnr = 10.0 * std::log10(1.0 / static_cast<double>(oracle));
  CHECK(std::abs(psnr(a, b) - expected_psnr) <= 1e-6 * expected_psnr);
}

TEST_CASE("motion energy of static and alternating videos") {
  CHECK(motion_energy(constant_video({4, 3, 3, 3}, 0.3f)) == 0.0);
  Video alt({4, 2, 2, 3});
  for (Index f = 0; f < 4; ++f) {
    for (Index i = 0; i < 12; ++i) alt[f * 12 + i] = static_cast<float>(f % 2);
  }
  CHECK(motion_energy(alt) == 1.0);
  CHECK_THROWS_AS(motion_energy(constant_video({1, 2, 2, 3}, 0.0f)), std::invalid_argument);
  CHECK_THROWS_AS(frozen_frame_fraction(constant_video({1, 2, 2, 3}, 0.0f)), std::invalid_argument);
}

TEST_CASE("channel permutation permutes per-channel motion") {
  const ChannelPermute perm{{2, 0, 1}};
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Video src = random_video({5, 6, 6, 3}, 100 + seed);
    const Video tgt = apply_color_map(src, perm);
    const auto s = channel_motion_totals(src), t = channel_motion_totals(tgt);
    for (int c = 0; c < 3; ++c) CHECK(t[c] == s[perm.perm[c]]);
    CHECK(motion_energy(tgt) == motion_energy(src));
  }
  const SceneSpec spec = random_scene(perm, 4, 8);
  const VideoPair vp = apply_edit_oracle(spec, perm);
  const VideoResult r = score_video("x", 0, vp.target, vp.target, vp.source);
  CHECK(r.motion_energy_ratio == 1.0);
  CHECK(r.psnr == kPsnrCap);
}

TEST_CASE("frozen fraction on static, moving and loose-threshold videos") {
  const Video still = constant_video({6, 4, 4, 3}, 0.5f);
  CHECK(frozen_frame_fraction(still) == 1.0);
  const SceneSpec spec = random_scene(ChannelPermute{}, 12, 8);
  const Video moving = render_video(spec);
  CHECK(frozen_frame_fraction(moving) == 0.0);
  CHECK(frozen_frame_fraction(moving, 1.5) == 1.0);
  Video half = still;
  for (Index i = 0; i < 48; ++i) half[3 * 48 + i] = 0.9f;  // frame 3 differs from both neighbours
  CHECK(frozen_frame_fraction(half) == doctest::Approx(0.6));
}

TEST_CASE("structural error counts only pixels the oracle leaves alone") {
  SceneSpec spec;
  spec.height = spec.width = 16;
  spec.frames = 2;
  spec.background = {0.0f, 0.0f, 0.0f};
  spec.shapes.push_back({ShapeKind::square, {1.0f, 1.0f, 1.0f}, 4.0, 8.0, 8.0, 1.0, 1.0});
  const VideoPair vp = apply_edit_oracle(spec, ShapeRemove{0});
  Video out = vp.target;
  // Damage a pixel inside the removed square only.
  const Index inside = (8 * 16 + 8) * 3;
  out[inside] = 0.5f;
  const VideoResult r = score_video("a", 2, out, vp.target, vp.source);
  REQUIRE(r.structural_mse_outside_edit.has_value());
  CHECK(*r.structural_mse_outside_edit == 0.0);
  CHECK(r.mse > 0.0);
  out[0] = 1.0f;
  CHECK(*score_video("a", 2, out, vp.target, vp.source).structural_mse_outside_edit > 0.0);
}

TEST_CASE("aggregate rows respect the report invariants") {
  std::vector<VideoResult> vids;
  vids.push_back({"0", 0, 20.0, 0.01, 0.0, 1.0, std::nullopt, ""});
  vids.push_back({"1", 0, 30.0, 0.001, 0.5, 0.5, std::nullopt, ""});
  vids.push_back({"2", 2, 10.0, 0.1, 1.0, 0.0, 0.25, ""});
  vids.push_back({"3", 2, 0.0, 0.0, 0.0, 0.0, std::nullopt, "boom"});
  const auto rows = aggregate(vids);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].n_videos == 2);
  CHECK(rows[0].psnr_mean == 25.0);
  CHECK(rows[0].psnr_min == 20.0);
  CHECK(rows[1].n_videos == 1);
  CHECK(*rows[1].structural_mse_outside_edit == 0.25);
  for (const auto& r : rows) {
    CHECK(r.psnr_min <= r.psnr_mean);
    CHECK(r.frozen_frame_fraction >= 0.0);
    CHECK(r.frozen_frame_fraction <= 1.0);
  }
}

TEST_CASE("report JSON round trip is lossless") {
  Report rep;
  rep.method = "direct-tuning";
  rep.videos.push_back({"00000", 0, 21.123456789012345, 0.0077, 0.125, 0.3333333333333333, 1e-9, ""});
  rep.videos.push_back({"00001", 2, 17.5, 0.02, 0.0, 1.25, std::nullopt, "bad frame"});
  rep.rows = aggregate(rep.videos);
  const Report back = Report::from_json(nlohmann::json::parse(rep.to_json().dump()));
  CHECK(back.to_json() == rep.to_json());
  CHECK(back.videos[0].psnr == rep.videos[0].psnr);
  CHECK(back.videos[1].error == "bad frame");
  CHECK(rep.to_csv().rfind("method,task_id,n_videos,psnr_mean", 0) == 0);
}

TEST_CASE("evaluate scores every video and records failures") {
  const fs::path dir = scratch_dir("eval_set");
  DatasetOptions opt;
  opt.pairs_per_task = 3;
  opt.frames = 4;
  opt.domain = SeedDomain::eval;
  opt.height = opt.width = 16;
  Dataset ds = gen_dataset(opt, dir);
  ModelConfig mc;
  mc.blocks = 1;
  mc.dim = 24;
  mc.heads = 2;
  mc.time_dim = 8;
  mc.ffn_hidden = 32;
  EditModel m = make_model(mc, Method::vifeedit, 4, 1, 2);

  EvalConfig ec;
  ec.sample.alpha = 0.0;
  const Report identity = evaluate(m, ds, ec);
  REQUIRE(identity.videos.size() == 3);
  for (const auto& v : identity.videos) {
    CHECK(v.error.empty());
    CHECK(v.motion_energy_ratio == 1.0);
    CHECK(v.frozen_frame_fraction == 0.0);
  }

  ec.sample.alpha = 1.0;
  ec.sample.steps = 2;
  ds.pairs[1].source = dir / "missing.vvf";
  std::vector<Video> outputs;
  const Report single = evaluate(m, ds, ec, &outputs);
  CHECK(single.videos.size() == 3);
  CHECK_FALSE(single.videos[1].error.empty());
  CHECK(single.rows.at(0).n_videos == 2);
  CHECK(outputs[0].shape() == Shape{4, 16, 16, 3});

  ec.threads = 3;
  const Report threaded = evaluate(m, ds, ec);
  CHECK(threaded.to_json() == single.to_json());
}

TEST_CASE("the oracle scored against itself gives capped rows") {
  const fs::path dir = scratch_dir("eval_self");
  DatasetOptions opt;
  opt.pairs_per_task = 2;
  opt.frames = 4;
  opt.domain = SeedDomain::eval;
  const Dataset ds = gen_dataset(opt, dir);
  std::vector<VideoResult> vids;
  for (const auto& e : ds.pairs) {
    const Video t = read_vvf(e.target);
    vids.push_back(score_video(e.id, e.task_id, t, t, read_vvf(e.source)));
  }
  const auto rows = aggregate(vids);
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].psnr_mean == kPsnrCap);
  CHECK(rows[0].psnr_min == kPsnrCap);
  CHECK(rows[0].n_videos == 2);
}
