#include "vifeedit/eval.hpp"
#include "vifeedit/synth.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <set>

using namespace vifeedit;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("vifeedit_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

Video random_video(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Video v(std::move(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = u(rng);
  return v;
}

SceneSpec one_square(double vx = 0.0, double vy = 0.0) {
  SceneSpec s;
  s.height = 16;
  s.width = 16;
  s.frames = 4;
  s.background = {0.2f, 0.4f, 0.6f};
  s.shapes.push_back({ShapeKind::square, {1.0f, 0.0f, 0.0f}, 4.0, 8.0, 8.0, vx, vy});
  return s;
}

}  // namespace

TEST_CASE("an empty scene renders the background in every frame") {
  SceneSpec s;
  s.frames = 3;
  s.background = {0.1f, 0.5f, 0.9f};
  const Video v = render_video(s);
  CHECK(v.shape() == Shape{3, 32, 32, 3});
  for (Index i = 0; i < v.size(); i += 3) {
    CHECK(v[i] == 0.1f);
    CHECK(v[i + 1] == 0.5f);
    CHECK(v[i + 2] == 0.9f);
  }
}

TEST_CASE("square rasterization covers the expected pixel block") {
  const Video v = render_video(one_square());
  // Side 4 centred at (8, 8): pixel centres 6.5 .. 9.5 are inside.
  auto red = [&](Index y, Index x) { return v[(y * 16 + x) * 3] == 1.0f; };
  CHECK(red(6, 6));
  CHECK(red(9, 9));
  CHECK_FALSE(red(5, 6));
  CHECK_FALSE(red(10, 9));
}

TEST_CASE("zero velocity freezes the video and motion unfreezes it") {
  const Video still = render_video(one_square());
  CHECK(frozen_frame_fraction(still) == 1.0);
  CHECK(motion_energy(still) == 0.0);
  const Video moving = render_video(one_square(1.0, -1.0));
  CHECK(frozen_frame_fraction(moving) == 0.0);
}

TEST_CASE("bouncing keeps shapes inside the canvas") {
  SceneSpec s = one_square(3.7, -2.3);
  for (int f = 0; f < 200; ++f) {
    const auto c = shape_centre(s, s.shapes[0], f);
    CHECK(c[0] >= 2.0);
    CHECK(c[0] <= 14.0);
    CHECK(c[1] >= 2.0);
    CHECK(c[1] <= 14.0);
  }
  // Reflection: moving right from x=12 at 3 px/frame hits the wall at 14.
  SceneSpec r = one_square(3.0, 0.0);
  r.shapes[0].x = 12.0;
  CHECK(shape_centre(r, r.shapes[0], 1)[0] == doctest::Approx(13.0));
}

TEST_CASE("out-of-canvas shapes are rejected") {
  SceneSpec s = one_square();
  s.shapes[0].x = 1.0;
  CHECK_THROWS_AS(render_video(s), std::invalid_argument);
}

TEST_CASE("channel permutation follows the output-takes-input rule") {
  Video px({1, 1, 1, 3}, {1.0f, 0.0f, 0.0f});
  const Video out = apply_color_map(px, ChannelPermute{{1, 2, 0}});
  CHECK(out[0] == 0.0f);
  CHECK(out[1] == 0.0f);
  CHECK(out[2] == 1.0f);
  const SceneSpec spec = random_scene(ChannelPermute{}, 5, 3);
  const VideoPair id = apply_edit_oracle(spec, ChannelPermute{{0, 1, 2}});
  CHECK(id.source.bit_equal(id.target));
}

TEST_CASE("channel permutation commutes with rendering") {
  const ChannelPermute perm{{2, 0, 1}};
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    SceneSpec spec = random_scene(perm, seed, 4);
    const VideoPair pair = apply_edit_oracle(spec, perm);
    auto permute = [&](Color c) { return Color{c[perm.perm[0]], c[perm.perm[1]], c[perm.perm[2]]}; };
    spec.background = permute(spec.background);
    for (auto& s : spec.shapes) s.color = permute(s.color);
    CHECK(render_video(spec).bit_equal(pair.target));
  }
}

TEST_CASE("color affine clamps to the unit range") {
  ColorAffine a;
  a.matrix = {2, 0, 0, 0, 1, 0, 0, 0, 1};
  a.bias = {0.0f, -0.5f, 0.0f};
  Video px({1, 1, 1, 3}, {0.75f, 0.25f, 0.5f});
  const Video out = apply_color_map(px, a);
  CHECK(out[0] == 1.0f);
  CHECK(out[1] == 0.0f);
  CHECK(out[2] == 0.5f);
}

TEST_CASE("shape-level oracles edit the scene description") {
  SceneSpec one = one_square();
  const VideoPair removed = apply_edit_oracle(one, ShapeRemove{0});
  SceneSpec empty = one;
  empty.shapes.clear();
  CHECK(removed.target.bit_equal(render_video(empty)));
  CHECK_THROWS_AS(apply_edit_oracle(one, ShapeRemove{1}), std::out_of_range);

  const VideoPair recolored = apply_edit_oracle(one, ShapeRecolor{0, {0.0f, 1.0f, 0.0f}});
  const Index centre = (8 * 16 + 8) * 3;
  CHECK(recolored.target[centre + 1] == 1.0f);
  CHECK(recolored.target[0] == recolored.source[0]);

  const VideoPair swapped = apply_edit_oracle(one, ShapeSwap{0, ShapeKind::circle});
  CHECK_FALSE(swapped.target.bit_equal(swapped.source));

  ShapeAdd add;
  add.shape = {ShapeKind::square, {0.0f, 0.0f, 0.0f}, 2.0, 2.0, 2.0, 0.0, 0.0};
  const VideoPair added = apply_edit_oracle(one, add);
  CHECK(added.target[(1 * 16 + 1) * 3] == 0.0f);
  CHECK(added.source[(1 * 16 + 1) * 3] == 0.2f);
}

TEST_CASE("edge condition pairs an edge map with the rendering") {
  const SceneSpec s = one_square();
  const VideoPair p = apply_edit_oracle(s, EdgeCondition{});
  CHECK(p.target.bit_equal(render_video(s)));
  CHECK(p.source.bit_equal(edge_map(p.target)));
  auto at = [&](Index y, Index x) { return p.source[(y * 16 + x) * 3]; };
  CHECK(at(6, 6) == 1.0f);   // inside edge of the square
  CHECK(at(8, 8) == 0.0f);   // interior
  CHECK(at(0, 0) == 0.0f);   // background
  CHECK(at(5, 7) == 1.0f);   // outside edge
}

TEST_CASE("random scenes satisfy the generator contract") {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const SceneSpec s = random_scene(ShapeRemove{}, seed, 8);
    REQUIRE(s.shapes.size() >= 1);
    REQUIRE(s.shapes.size() <= 3);
    CHECK(s.shapes[0].kind == ShapeKind::circle);
    for (std::size_t i = 0; i < s.shapes.size(); ++i) {
      const auto& sh = s.shapes[i];
      CHECK(sh.size >= 6.0);
      CHECK(sh.size <= 12.0);
      CHECK(std::abs(sh.vx) >= 1.0);
      CHECK(std::abs(sh.vy) >= 1.0);
      if (i > 0) CHECK(sh.kind != ShapeKind::circle);
      double contrast = 0.0;
      for (int c = 0; c < 3; ++c) contrast += std::abs(sh.color[c] - s.background[c]);
      CHECK(contrast >= 0.6);
    }
    CHECK(random_scene(ShapeRemove{}, seed, 8) == s);
    CHECK_NOTHROW(render_video(s));
  }
}

TEST_CASE("train and eval scene seeds never collide") {
  std::set<std::uint64_t> train;
  for (std::uint64_t i = 0; i < 5000; ++i) train.insert(scene_seed(7, i, SeedDomain::train));
  CHECK(train.size() == 5000);
  for (std::uint64_t i = 0; i < 5000; ++i) {
    CHECK(train.count(scene_seed(7, i, SeedDomain::eval)) == 0);
    CHECK(train.count(scene_seed(11, i, SeedDomain::eval)) == 0);
  }
}

TEST_CASE("task names round-trip and unknown names list the choices") {
  for (const auto& name : task_names()) CHECK(task_name(task_from_name(name)) == name);
  CHECK(task_id(task_from_name("shape-remove")) == 2);
  try {
    task_from_name("blur");
    FAIL("expected an exception");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("channel-permute") != std::string::npos);
  }
}

TEST_CASE("VVF round trip is bit exact") {
  const Video v = random_video({3, 5, 7, 3}, 1);
  CHECK(decode_vvf(encode_vvf(v)).bit_equal(v));
  const std::string bytes = encode_vvf(v);
  CHECK(bytes.size() == 24 + 3 * 5 * 7 * 3 * 4);
  CHECK(bytes.substr(0, 4) == "VIFE");
  const fs::path dir = scratch_dir("vvf");
  write_vvf(dir / "a.vvf", v);
  CHECK(read_vvf(dir / "a.vvf").bit_equal(v));
}

TEST_CASE("VVF decoding errors name the byte offset") {
  const std::string good = encode_vvf(random_video({1, 2, 2, 3}, 2));
  auto message = [](const std::string& bytes) {
    try {
      decode_vvf(bytes);
    } catch (const FormatError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(message(good.substr(0, 30)).find("offset 30") != std::string::npos);
  CHECK(message(good.substr(0, 10)).find("offset 10") != std::string::npos);
  std::string bad = good;
  bad[0] = 'X';
  CHECK(message(bad).find("magic at byte offset 0") != std::string::npos);
  std::string version = good;
  version[4] = 9;
  CHECK(message(version).find("offset 4") != std::string::npos);
  CHECK(message(good + "x").find("trailing") != std::string::npos);
}

TEST_CASE("PPM export rounds to bytes") {
  CHECK(ppm_byte(0.5f) == 128);
  CHECK(ppm_byte(0.0f) == 0);
  CHECK(ppm_byte(1.0f) == 255);
  CHECK(ppm_byte(-3.0f) == 0);
  CHECK(ppm_byte(7.0f) == 255);
  const fs::path dir = scratch_dir("ppm");
  Video v({2, 1, 2, 3}, {0.5f, 0, 1, 0, 0, 0, 1, 1, 1, 0.2f, 0.2f, 0.2f});
  write_ppm(dir / "f1.ppm", v, 1);
  const std::string bytes = read_file(dir / "f1.ppm");
  const std::string header = "P6\n2 1\n255\n";
  REQUIRE(bytes.size() == header.size() + 6);
  CHECK(bytes.substr(0, header.size()) == header);
  CHECK(static_cast<unsigned char>(bytes[header.size()]) == 255);
  CHECK(static_cast<unsigned char>(bytes[header.size() + 3]) == 51);
}

TEST_CASE("dataset generation is reproducible and complete") {
  const fs::path a = scratch_dir("ds_a"), b = scratch_dir("ds_b");
  DatasetOptions opt;
  opt.pairs_per_task = 250;
  opt.seed = 7;
  const Dataset da = gen_dataset(opt, a);
  gen_dataset(opt, b);
  std::size_t vvf = 0;
  for (const auto& e : fs::directory_iterator(a)) vvf += e.path().extension() == ".vvf";
  CHECK(vvf == 500);
  CHECK(da.pairs.size() == 250);
  CHECK(da.pairs[3].id == "00003");
  for (const auto& e : fs::directory_iterator(a)) {
    CHECK(read_file(e.path()) == read_file(b / e.path().filename()));
  }
  const Dataset loaded = load_dataset(a);
  CHECK(loaded.pairs.size() == 250);
  CHECK(loaded.seed == 7);
  CHECK(read_vvf(loaded.pairs[10].source).shape() == Shape{1, 32, 32, 3});
}

TEST_CASE("multi-task eval datasets use held-out seeds and several frames") {
  const fs::path dir = scratch_dir("ds_eval");
  DatasetOptions opt;
  opt.tasks = {ChannelPermute{}, ShapeRemove{}};
  opt.pairs_per_task = 3;
  opt.frames = 8;
  opt.domain = SeedDomain::eval;
  const Dataset ds = gen_dataset(opt, dir);
  REQUIRE(ds.pairs.size() == 6);
  CHECK(ds.pairs[0].task_id == 0);
  CHECK(ds.pairs[5].task_id == 2);
  const Video v = read_vvf(ds.pairs[4].source);
  CHECK(v.dim(0) == 8);
  CHECK(frozen_frame_fraction(v) == 0.0);
}
