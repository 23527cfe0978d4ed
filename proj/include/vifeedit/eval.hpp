#pragma once

#include "vifeedit/sampler.hpp"

#include "json.hpp"

#include <array>
#include <optional>
#include <string>
#include <vector>

namespace vifeedit {

inline constexpr double kPsnrCap = 99.0;
inline constexpr double kFrozenTau = 1e-3;

double mse(const Video& a, const Video& b);
/// 10 log10(1 / mse), capped at kPsnrCap (also for mse = 0).
double psnr(const Video& a, const Video& b);

/// Per-channel sums of |frame[k+1] - frame[k]| over all adjacent pairs.
std::array<double, 3> channel_motion_totals(const Video& v);
/// Mean over adjacent frame pairs of the mean absolute pixel difference.
double motion_energy(const Video& v);
/// Fraction of adjacent pairs whose mean absolute difference is below tau.
double frozen_frame_fraction(const Video& v, double tau = kFrozenTau);

struct VideoResult {
  std::string id;
  int task_id = 0;
  double psnr = 0.0;
  double mse = 0.0;
  double frozen_frame_fraction = 0.0;
  double motion_energy_ratio = 0.0;
  std::optional<double> structural_mse_outside_edit;
  std::string error;  // non-empty when the sample failed
};

struct TaskRow {
  int task_id = 0;
  int n_videos = 0;
  double psnr_mean = 0.0;
  double psnr_min = 0.0;
  double frozen_frame_fraction = 0.0;
  double motion_energy_ratio = 0.0;
  std::optional<double> structural_mse_outside_edit;
};

struct Report {
  std::string method = "vifeedit";
  std::vector<VideoResult> videos;
  std::vector<TaskRow> rows;

  nlohmann::json to_json() const;
  static Report from_json(const nlohmann::json& j);
  std::string to_csv() const;
};

/// Metrics of one edited video against its oracle target and its source.
VideoResult score_video(const std::string& id, int task_id, const Video& output, const Video& target,
                        const Video& source, double tau = kFrozenTau);

/// Per-task means over the successful videos.
std::vector<TaskRow> aggregate(const std::vector<VideoResult>& videos);

struct EvalConfig {
  SampleConfig sample;
  double tau = kFrozenTau;
  int threads = 1;
};

/// Sample noise seed of eval video `index`.
std::uint64_t video_seed(std::uint64_t seed, std::size_t index);

/// Edits every source of `eval_set` and scores it. Per-sample failures are
/// recorded in the report, not thrown.
Report evaluate(EditModel& model, const Dataset& eval_set, const EvalConfig& config,
                std::vector<Video>* outputs = nullptr);

}  // namespace vifeedit
