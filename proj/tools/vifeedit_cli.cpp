#include "vifeedit/checks.hpp"
#include "vifeedit/run_config.hpp"

#include "CLI11.hpp"

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>

using namespace vifeedit;
namespace fs = std::filesystem;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  int threads = 1;
};

void log_line(const std::string& s) { std::cout << s << std::endl; }

RunConfig load_config(const Globals& g) {
  if (g.config.empty()) return RunConfig{};
  return RunConfig::load(g.config);
}

Dataset ensure_eval_set(const RunConfig& rc) {
  if (fs::exists(rc.paths.eval_data / "manifest.json")) return load_dataset(rc.paths.eval_data);
  DatasetOptions opt;
  opt.tasks = parse_tasks(rc.data.tasks);
  opt.pairs_per_task = rc.data.eval_videos;
  opt.seed = rc.data.eval_seed;
  opt.frames = rc.data.eval_frames;
  opt.domain = SeedDomain::eval;
  opt.height = opt.width = rc.data.canvas;
  log_line("generating eval set in " + rc.paths.eval_data.string());
  return gen_dataset(opt, rc.paths.eval_data);
}

EditModel train_model(const RunConfig& rc, Method method, const fs::path& out, int epochs,
                      const std::optional<fs::path>& resume) {
  const Dataset ds = load_dataset(rc.paths.data);
  const auto data = load_training_pairs(ds);
  TrainConfig tc = rc.train;
  tc.epochs = epochs;
  fs::create_directories(out);
  TrainState state;
  EditModel model;
  TrainOptions opt;
  opt.checkpoint_dir = out;
  opt.loss_csv = out / "loss.csv";
  if (resume) {
    model = resume_from(load_checkpoint(*resume), state, tc);
    log_line("resumed at epoch " + std::to_string(state.epoch) + ", step " + std::to_string(state.step));
  } else {
    model = model_from_base(load_or_pretrain_base(rc, log_line), method, tc.rank, rc.adapter_seed);
    state = init_train_state(model, tc);
    fs::remove(opt.loss_csv);
  }
  opt.on_epoch = [&](const TrainState& s, double loss) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "epoch %d/%d  steps %lld  mean loss %.6f", s.epoch, tc.epochs,
                  static_cast<long long>(s.step), loss);
    log_line(buf);
  };
  log_line("training " + method_name(model.method) + " on " + std::to_string(data.size()) + " pairs from " +
           rc.paths.data.string());
  train(data, model, state, tc, opt);
  save_checkpoint(out / "model.vfck", training_checkpoint(model, state, tc));
  log_line("wrote " + (out / "model.vfck").string());
  return model;
}

std::vector<std::string> gate_violations(const Report& report, const EvalGates& gates) {
  std::vector<std::string> out;
  for (const auto& v : report.videos) {
    if (!v.error.empty()) out.push_back("video " + v.id + " failed: " + v.error);
  }
  for (const auto& r : report.rows) {
    const std::string row = report.method + " task " + std::to_string(r.task_id);
    if (gates.min_psnr_mean && r.psnr_mean < *gates.min_psnr_mean) {
      out.push_back(row + ": psnr_mean " + std::to_string(r.psnr_mean) + " < " + std::to_string(*gates.min_psnr_mean));
    }
    if (gates.max_frozen_fraction && r.frozen_frame_fraction > *gates.max_frozen_fraction) {
      out.push_back(row + ": frozen_frame_fraction " + std::to_string(r.frozen_frame_fraction) + " > " +
                    std::to_string(*gates.max_frozen_fraction));
    }
    if (gates.min_motion_energy_ratio && r.motion_energy_ratio < *gates.min_motion_energy_ratio) {
      out.push_back(row + ": motion_energy_ratio " + std::to_string(r.motion_energy_ratio) + " < " +
                    std::to_string(*gates.min_motion_energy_ratio));
    }
  }
  return out;
}

void print_rows(const Report& r) {
  for (const auto& row : r.rows) {
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "%-13s task %d  n=%d  psnr_mean %.3f  psnr_min %.3f  frozen %.3f  motion_ratio %.3f", r.method.c_str(),
                  row.task_id, row.n_videos, row.psnr_mean, row.psnr_min, row.frozen_frame_fraction,
                  row.motion_energy_ratio);
    log_line(buf);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale video-free editing: synthetic data, adapter training, editing and evaluation"};
  app.fallthrough();
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "RunConfig JSON file")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Seed override for the subcommand's random stream");
  app.add_option("--threads", g.threads, "Worker threads for evaluation")->check(CLI::PositiveNumber);

  auto* synth = app.add_subcommand("synth", "Generate a paired dataset");
  std::vector<std::string> synth_tasks;
  std::optional<int> synth_n, synth_frames;
  std::string synth_out, split = "train";
  synth->add_option("--task", synth_tasks, "Edit task name (repeatable)");
  synth->add_option("--n", synth_n, "Pairs per task")->check(CLI::PositiveNumber);
  synth->add_option("--frames", synth_frames, "Frames per video")->check(CLI::PositiveNumber);
  synth->add_option("--out", synth_out, "Output directory");
  synth->add_option("--split", split, "train (single frames) or eval (held-out videos)")
      ->check(CLI::IsMember({"train", "eval"}));

  auto* train_cmd = app.add_subcommand("train", "Train an adapter (or the direct-tuning baseline)");
  std::optional<int> epochs;
  std::string train_out, method_arg, resume;
  train_cmd->add_option("--epochs", epochs, "Epoch count")->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--method", method_arg, "vifeedit or direct-tuning");
  train_cmd->add_option("--out", train_out, "Run directory (checkpoints, loss.csv)");
  train_cmd->add_option("--resume", resume, "Resume from a training checkpoint")->check(CLI::ExistingFile);

  auto* edit = app.add_subcommand("edit", "Edit one video");
  std::string edit_in, edit_out, edit_ck, edit_task, ppm_dir;
  std::optional<double> alpha;
  std::optional<int> steps;
  edit->add_option("input", edit_in, "Source VVF")->required()->check(CLI::ExistingFile);
  edit->add_option("output", edit_out, "Output VVF")->required();
  edit->add_option("--checkpoint", edit_ck, "Trained model checkpoint");
  edit->add_option("--task", edit_task, "Task name used as prompt");
  edit->add_option("--alpha", alpha, "SDEdit start time in [0, 1]")->check(CLI::Range(0.0, 1.0));
  edit->add_option("--steps", steps, "Euler steps")->check(CLI::PositiveNumber);
  edit->add_option("--ppm", ppm_dir, "Also write every frame as PPM into this directory");

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate against the analytic oracle");
  std::string eval_ck, compare, compare_ck, report_dir;
  std::optional<double> eval_alpha;
  std::optional<int> eval_steps;
  eval_cmd->add_option("--checkpoint", eval_ck, "Trained model checkpoint");
  eval_cmd->add_option("--compare", compare, "Also evaluate a baseline")->check(CLI::IsMember({"direct-tuning"}));
  eval_cmd->add_option("--compare-checkpoint", compare_ck, "Baseline checkpoint (trained when absent)");
  eval_cmd->add_option("--report", report_dir, "Report directory");
  eval_cmd->add_option("--alpha", eval_alpha, "SDEdit start time in [0, 1]")->check(CLI::Range(0.0, 1.0));
  eval_cmd->add_option("--steps", eval_steps, "Euler steps")->check(CLI::PositiveNumber);

  auto* selftest = app.add_subcommand("selftest", "Run the bit-level invariant suite on micro models");
  std::vector<std::string> inject;
  selftest->add_option("--inject", inject, "Deliberate fault (negative control)")
      ->check(CLI::IsMember({"unfreeze-base", "nonzero-lora-up"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*selftest) {
      CheckHooks hooks;
      for (const auto& f : inject) {
        if (f == "unfreeze-base") hooks.unfreeze_base = true;
        if (f == "nonzero-lora-up") hooks.nonzero_lora_up = true;
      }
      int failed = 0;
      for (const auto& r : run_selftest(hooks)) {
        log_line(std::string(r.passed ? "PASS " : "FAIL ") + r.name + "  " + r.detail);
        failed += r.passed ? 0 : 1;
      }
      log_line(failed == 0 ? "selftest: all checks passed" : "selftest: " + std::to_string(failed) + " check(s) failed");
      return failed == 0 ? 0 : kExitFailure;
    }

    RunConfig rc = load_config(g);

    if (*synth) {
      DatasetOptions opt;
      opt.tasks = parse_tasks(synth_tasks.empty() ? rc.data.tasks : synth_tasks);
      opt.height = opt.width = rc.data.canvas;
      fs::path dir;
      if (split == "train") {
        opt.pairs_per_task = synth_n.value_or(rc.data.n_pairs);
        opt.seed = g.seed.value_or(rc.data.seed);
        opt.frames = synth_frames.value_or(1);
        opt.domain = SeedDomain::train;
        dir = synth_out.empty() ? rc.paths.data : fs::path(synth_out);
      } else {
        opt.pairs_per_task = synth_n.value_or(rc.data.eval_videos);
        opt.seed = g.seed.value_or(rc.data.eval_seed);
        opt.frames = synth_frames.value_or(rc.data.eval_frames);
        opt.domain = SeedDomain::eval;
        dir = synth_out.empty() ? rc.paths.eval_data : fs::path(synth_out);
      }
      const Dataset ds = gen_dataset(opt, dir);
      std::string tasks;
      for (const auto& t : opt.tasks) tasks += (tasks.empty() ? "" : ", ") + task_name(t);
      log_line("wrote " + std::to_string(ds.pairs.size()) + " pairs (" + std::to_string(2 * ds.pairs.size()) +
               " VVF files) to " + dir.string());
      log_line("  tasks: " + tasks + "  frames: " + std::to_string(opt.frames) + "  seed: " + std::to_string(opt.seed) +
               "  split: " + split);
      log_line("  manifest: " + (dir / "manifest.json").string());
      return 0;
    }

    if (*train_cmd) {
      if (g.seed) rc.train.seed = *g.seed;
      const Method method = method_arg.empty() ? rc.method : method_from_name(method_arg);
      const fs::path out = train_out.empty() ? rc.paths.out : fs::path(train_out);
      train_model(rc, method, out, epochs.value_or(rc.train.epochs),
                  resume.empty() ? std::nullopt : std::optional<fs::path>(resume));
      return 0;
    }

    if (*edit) {
      SampleConfig sc = rc.sample;
      if (g.seed) sc.seed = *g.seed;
      if (alpha) sc.alpha = *alpha;
      if (steps) sc.steps = *steps;
      const fs::path ck = edit_ck.empty() ? rc.paths.out / "model.vfck" : fs::path(edit_ck);
      EditModel model = load_model(load_checkpoint(ck));
      const int task = task_id(task_from_name(edit_task.empty() ? rc.data.tasks.front() : edit_task));
      const Video src = read_vvf(edit_in);
      const Video out = edit_video(src, task, model, sc);
      write_vvf(edit_out, out);
      if (!ppm_dir.empty()) {
        fs::create_directories(ppm_dir);
        for (Index f = 0; f < out.dim(0); ++f) {
          char name[32];
          std::snprintf(name, sizeof(name), "frame_%03lld.ppm", static_cast<long long>(f));
          write_ppm(fs::path(ppm_dir) / name, out, static_cast<int>(f));
        }
      }
      log_line("wrote " + edit_out + " (" + shape_string(out.shape()) + ")");
      return 0;
    }

    if (*eval_cmd) {
      EvalConfig ec;
      ec.sample = rc.sample;
      if (g.seed) ec.sample.seed = *g.seed;
      if (eval_alpha) ec.sample.alpha = *eval_alpha;
      if (eval_steps) ec.sample.steps = *eval_steps;
      ec.tau = rc.eval.tau;
      ec.threads = g.threads;
      const fs::path out = report_dir.empty() ? rc.paths.out : fs::path(report_dir);
      fs::create_directories(out);
      const Dataset eval_set = ensure_eval_set(rc);
      const fs::path ck = eval_ck.empty() ? rc.paths.out / "model.vfck" : fs::path(eval_ck);
      EditModel model = load_model(load_checkpoint(ck));
      std::vector<Report> reports{evaluate(model, eval_set, ec)};
      if (!compare.empty()) {
        const fs::path baseline_dir = rc.paths.out / "direct-tuning";
        fs::path bck = compare_ck.empty() ? baseline_dir / "model.vfck" : fs::path(compare_ck);
        EditModel baseline;
        if (fs::exists(bck)) {
          baseline = load_model(load_checkpoint(bck));
        } else {
          baseline = train_model(rc, Method::direct_tuning, baseline_dir, rc.train.epochs, std::nullopt);
        }
        reports.push_back(evaluate(baseline, eval_set, ec));
      }
      std::string csv;
      nlohmann::json all = nlohmann::json::array();
      for (std::size_t i = 0; i < reports.size(); ++i) {
        const std::string body = reports[i].to_csv();
        csv += i == 0 ? body : body.substr(body.find('\n') + 1);
        all.push_back(reports[i].to_json());
        print_rows(reports[i]);
      }
      atomic_write(out / "report.csv", csv);
      atomic_write(out / "report.json", (reports.size() == 1 ? reports[0].to_json() : all).dump(2) + "\n");
      log_line("wrote " + (out / "report.csv").string() + " and report.json");
      const auto violations = gate_violations(reports[0], rc.eval);
      for (const auto& v : violations) log_line("THRESHOLD " + v);
      return violations.empty() ? 0 : kExitFailure;
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kExitFailure;
  }
  return 0;
}
