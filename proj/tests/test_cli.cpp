#include "vifeedit/run_config.hpp"

#include <doctest.h>

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

using namespace vifeedit;
namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "vifeedit_cli_test";

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

int run(const std::string& args) {
  const fs::path log = kRoot / "last.log";
  const std::string cmd = std::string(VIFEEDIT_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string last_output() { return slurp(kRoot / "last.log"); }

/// Writes a micro run config under kRoot and returns its --config argument.
std::string setup(const std::string& extra_eval = "null") {
  static bool cleaned = false;
  if (!cleaned) {
    fs::remove_all(kRoot);
    cleaned = true;
  }
  fs::create_directories(kRoot);
  const fs::path cfg = kRoot / "config.json";
  std::ofstream(cfg) << R"({
  "model": {"blocks": 1, "d": 16, "heads": 1, "time_dim": 8, "ffn_hidden": 32, "num_tasks": 4},
  "train": {"rank": 4, "epochs": 2, "batch_size": 4, "lr": 0.001},
  "sample": {"steps": 3},
  "pretrain": {"steps": 4, "batch_size": 2, "frames": 2},
  "data": {"n_pairs": 8, "canvas": 16, "eval_videos": 2, "eval_frames": 3},
  "paths": {"data": ")" + (kRoot / "train").string() + R"(", "eval_data": ")" + (kRoot / "eval").string() +
                             R"(", "out": ")" + (kRoot / "out").string() + R"(", "base": ")" +
                             (kRoot / "base.vfck").string() + R"("},
  "eval": {"min_psnr_mean": )" + extra_eval + R"(}
})";
  return "--config " + cfg.string();
}

bool same_trainable(EditModel& a, EditModel& b) {
  auto pa = a.trainable();
  auto pb = b.trainable();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    const auto& x = pa[i]->value;
    const auto& y = pb[i]->value;
    if (pa[i]->name != pb[i]->name || x.shape() != y.shape()) return false;
    if (std::memcmp(x.ptr(), y.ptr(), sizeof(float) * x.size()) != 0) return false;
  }
  return true;
}

std::size_t count_files(const fs::path& dir, const std::string& ext) {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(dir)) n += e.path().extension() == ext ? 1 : 0;
  return n;
}

}  // namespace

TEST_CASE("synth writes 500 VVF files and is byte-reproducible") {
  const std::string cfg = setup();
  REQUIRE(run(cfg + " synth --n 250 --out " + (kRoot / "s1").string()) == 0);
  REQUIRE(run(cfg + " synth --n 250 --out " + (kRoot / "s2").string()) == 0);
  CHECK(count_files(kRoot / "s1", ".vvf") == 500);
  for (const auto& e : fs::directory_iterator(kRoot / "s1")) {
    const fs::path twin = kRoot / "s2" / e.path().filename();
    REQUIRE(fs::exists(twin));
    CHECK_MESSAGE(slurp(e.path()) == slurp(twin), e.path().filename());
  }
  REQUIRE(run(cfg + " --seed 99 synth --n 250 --out " + (kRoot / "s3").string()) == 0);
  std::size_t differing = 0;
  for (const auto& e : fs::directory_iterator(kRoot / "s3")) {
    if (e.path().extension() == ".vvf") differing += slurp(e.path()) != slurp(kRoot / "s1" / e.path().filename()) ? 1 : 0;
  }
  CHECK(differing > 400);
}

TEST_CASE("usage errors exit with code 2") {
  const std::string cfg = setup();
  CHECK(run(cfg + " synth --task repaint --out " + (kRoot / "bad").string()) == 2);
  CHECK(last_output().find("repaint") != std::string::npos);
  CHECK(last_output().find("channel-permute") != std::string::npos);
  CHECK(run(cfg + " synth --bogus-flag") == 2);
  CHECK(run("") == 2);
  CHECK(run(cfg + " edit --alpha 1.5 " + (kRoot / "config.json").string() + " out.vvf") == 2);
  std::ofstream(kRoot / "broken.json") << R"({"train": {"learning_rate": 1}})";
  CHECK(run("--config " + (kRoot / "broken.json").string() + " synth") == 2);
  CHECK(last_output().find("train.learning_rate") != std::string::npos);
}

TEST_CASE("train with zero epochs saves the initial adapter") {
  const std::string cfg = setup();
  REQUIRE(run(cfg + " synth") == 0);
  REQUIRE(run(cfg + " train --epochs 0 --out " + (kRoot / "e0").string()) == 0);
  EditModel saved = load_model(load_checkpoint(kRoot / "e0" / "model.vfck"));
  const RunConfig rc = RunConfig::load(kRoot / "config.json");
  EditModel fresh = model_from_base(load_backbone(rc.paths.base), Method::vifeedit, rc.train.rank, rc.adapter_seed);
  CHECK(same_trainable(saved, fresh));
}

TEST_CASE("resumed training matches an uninterrupted run bit for bit") {
  const std::string cfg = setup();
  REQUIRE(run(cfg + " synth") == 0);
  REQUIRE(run(cfg + " train --epochs 2 --out " + (kRoot / "full").string()) == 0);
  REQUIRE(run(cfg + " train --epochs 1 --out " + (kRoot / "half").string()) == 0);
  REQUIRE(run(cfg + " train --epochs 2 --out " + (kRoot / "half").string() + " --resume " +
              (kRoot / "half" / "latest.vfck").string()) == 0);
  CHECK(last_output().find("resumed at epoch 1") != std::string::npos);
  EditModel a = load_model(load_checkpoint(kRoot / "full" / "model.vfck"));
  EditModel b = load_model(load_checkpoint(kRoot / "half" / "model.vfck"));
  CHECK(same_trainable(a, b));
  CHECK(slurp(kRoot / "full" / "loss.csv") == slurp(kRoot / "half" / "loss.csv"));
}

TEST_CASE("edit with alpha 0 copies the source exactly") {
  const std::string cfg = setup();
  REQUIRE(run(cfg + " synth --split eval") == 0);
  REQUIRE(run(cfg + " train --epochs 1") == 0);
  fs::path src;
  for (const auto& e : fs::directory_iterator(kRoot / "eval")) {
    if (e.path().extension() == ".vvf") src = e.path();
  }
  REQUIRE_FALSE(src.empty());
  const fs::path out = kRoot / "edited.vvf";
  REQUIRE(run(cfg + " edit " + src.string() + " " + out.string() + " --alpha 0") == 0);
  CHECK(slurp(out) == slurp(src));

  const fs::path again = kRoot / "edited_again.vvf";
  REQUIRE(run(cfg + " --seed 5 edit " + src.string() + " " + out.string()) == 0);
  REQUIRE(run(cfg + " --seed 5 edit " + src.string() + " " + again.string()) == 0);
  CHECK(slurp(out) == slurp(again));
  REQUIRE(run(cfg + " --seed 6 edit " + src.string() + " " + again.string()) == 0);
  CHECK(slurp(out) != slurp(again));

  const fs::path eight = kRoot / "eight.vvf";
  SceneSpec spec = random_scene(ChannelPermute{}, 3, 8, 16, 16);
  write_vvf(eight, render_video(spec));
  REQUIRE(run(cfg + " edit " + eight.string() + " " + out.string()) == 0);
  const Video edited = read_vvf(out);
  CHECK(edited.shape() == Shape{8, 16, 16, 3});
  CHECK(edited.data().minCoeff() >= 0.0f);
  CHECK(edited.data().maxCoeff() <= 1.0f);

  const fs::path ppm = kRoot / "frames";
  REQUIRE(run(cfg + " edit " + src.string() + " " + out.string() + " --alpha 1 --ppm " + ppm.string()) == 0);
  CHECK(slurp(out) != slurp(src));
  CHECK(count_files(ppm, ".ppm") == 3);
}

TEST_CASE("eval writes reports and gates the exit code") {
  std::string cfg = setup();
  REQUIRE(run(cfg + " synth") == 0);
  REQUIRE(run(cfg + " train --epochs 1") == 0);
  CHECK(run(cfg + " eval --report " + (kRoot / "r1").string()) == 0);
  CHECK(fs::exists(kRoot / "r1" / "report.csv"));
  CHECK(fs::exists(kRoot / "r1" / "report.json"));
  const std::string csv = slurp(kRoot / "r1" / "report.csv");
  CHECK(csv.find("vifeedit") != std::string::npos);

  cfg = setup("99.0");
  CHECK(run(cfg + " eval --report " + (kRoot / "r2").string()) == 1);
  CHECK(last_output().find("THRESHOLD") != std::string::npos);
  CHECK(fs::exists(kRoot / "r2" / "report.csv"));

  cfg = setup();
  CHECK(run(cfg + " eval --compare direct-tuning --report " + (kRoot / "r3").string()) == 0);
  const std::string both = slurp(kRoot / "r3" / "report.csv");
  CHECK(both.find("direct-tuning") != std::string::npos);
  CHECK(fs::exists(kRoot / "out" / "direct-tuning" / "model.vfck"));
}

TEST_CASE("selftest exit codes follow the checks") {
  CHECK(run("selftest") == 0);
  CHECK(run("selftest --inject unfreeze-base") == 1);
  CHECK(last_output().find("FAIL frozen-base") != std::string::npos);
}
