#pragma once

#include "vifeedit/eval.hpp"
#include "vifeedit/trainer.hpp"

#include "json.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace vifeedit {

struct DataConfig {
  std::vector<std::string> tasks{"channel-permute"};
  int n_pairs = 250;
  std::uint64_t seed = 7;
  int canvas = 32;
  int eval_videos = 20;
  int eval_frames = 8;
  std::uint64_t eval_seed = 11;
};

struct PathsConfig {
  std::filesystem::path data = "run/data/train";
  std::filesystem::path eval_data = "run/data/eval";
  std::filesystem::path out = "run/out";
  /// Pretrained backbone; created by pretraining when missing.
  std::filesystem::path base = "run/base.vfck";
};

/// Gates for `eval`; unset entries are not checked.
struct EvalGates {
  std::optional<double> min_psnr_mean;
  std::optional<double> max_frozen_fraction;
  std::optional<double> min_motion_energy_ratio;
  double tau = kFrozenTau;
};

struct RunConfig {
  ModelConfig model;
  Method method = Method::vifeedit;
  TrainConfig train;
  SampleConfig sample;
  PretrainConfig pretrain;
  DataConfig data;
  PathsConfig paths;
  EvalGates eval;
  std::uint64_t adapter_seed = 1;

  nlohmann::json to_json() const;
  /// Missing keys keep their defaults; unknown sections or keys throw
  /// std::invalid_argument naming the dotted key.
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);
  void validate() const;
};

std::vector<EditTask> parse_tasks(const std::vector<std::string>& names);

using LogFn = std::function<void(const std::string&)>;

Checkpoint backbone_checkpoint(BackboneParams<float>& base, const PretrainConfig& pretrain);
BackboneParams<float> load_backbone(const std::filesystem::path& path);

/// Loads paths.base when it exists (checking it matches config.model),
/// otherwise pretrains a backbone from config.pretrain and writes it there.
BackboneParams<float> load_or_pretrain_base(const RunConfig& config, const LogFn& log = {});

/// Fresh trainable state for `method` on top of a copy of `base`.
EditModel model_from_base(const BackboneParams<float>& base, Method method, int rank, std::uint64_t adapter_seed);

}  // namespace vifeedit
