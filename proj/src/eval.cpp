#include "vifeedit/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <thread>

namespace vifeedit {

using nlohmann::json;

namespace {

void require_same(const Video& a, const Video& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()) +
                     " differ");
  }
}

void require_motion(const Video& v, const char* op) {
  if (v.rank() != 4 || v.dim(0) < 2) {
    throw std::invalid_argument(std::string(op) + " needs at least 2 frames, got shape " + shape_string(v.shape()));
  }
}

double pair_energy(const Video& v, Index k) {
  const Index n = v.size() / v.dim(0);
  const float* a = v.ptr() + k * n;
  const float* b = a + n;
  double s = 0.0;
  for (Index i = 0; i < n; ++i) s += std::abs(static_cast<double>(b[i]) - static_cast<double>(a[i]));
  return s / static_cast<double>(n);
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> optional_from(const json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

}  // namespace

double mse(const Video& a, const Video& b) {
  require_same(a, b, "mse");
  double s = 0.0;
  for (Index i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += d * d;
  }
  return s / static_cast<double>(a.size());
}

double psnr(const Video& a, const Video& b) {
  const double m = mse(a, b);
  if (m == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / m));
}

std::array<double, 3> channel_motion_totals(const Video& v) {
  require_motion(v, "motion_energy");
  if (v.dim(3) != 3) throw ShapeError("motion energy expects 3 channels");
  std::array<double, 3> totals{0.0, 0.0, 0.0};
  const Index n = v.size() / v.dim(0);
  for (Index k = 0; k + 1 < v.dim(0); ++k) {
    const float* a = v.ptr() + k * n;
    const float* b = a + n;
    for (Index i = 0; i < n; ++i) {
      totals[static_cast<std::size_t>(i % 3)] += std::abs(static_cast<double>(b[i]) - static_cast<double>(a[i]));
    }
  }
  return totals;
}

double motion_energy(const Video& v) {
  auto totals = channel_motion_totals(v);
  // Summing in sorted order makes the result independent of channel order.
  std::sort(totals.begin(), totals.end());
  const double sum = (totals[0] + totals[1]) + totals[2];
  return sum / (static_cast<double>(v.dim(0) - 1) * static_cast<double>(v.size() / v.dim(0)));
}

double frozen_frame_fraction(const Video& v, double tau) {
  require_motion(v, "frozen_frame_fraction");
  int frozen = 0;
  for (Index k = 0; k + 1 < v.dim(0); ++k) frozen += pair_energy(v, k) < tau ? 1 : 0;
  return static_cast<double>(frozen) / static_cast<double>(v.dim(0) - 1);
}

VideoResult score_video(const std::string& id, int task_id, const Video& output, const Video& target,
                        const Video& source, double tau) {
  require_same(output, target, "score_video");
  require_same(output, source, "score_video");
  VideoResult r;
  r.id = id;
  r.task_id = task_id;
  r.mse = mse(output, target);
  r.psnr = psnr(output, target);
  if (output.dim(0) >= 2) {
    r.frozen_frame_fraction = frozen_frame_fraction(output, tau);
    const double src_energy = motion_energy(source);
    r.motion_energy_ratio = src_energy > 0.0 ? motion_energy(output) / src_energy : 0.0;
  }
  // Pixels the oracle leaves untouched.
  double s = 0.0;
  Index count = 0;
  const Index c = output.dim(3);
  for (Index p = 0; p < output.size() / c; ++p) {
    bool same = true;
    for (Index k = 0; k < c; ++k) same = same && source[p * c + k] == target[p * c + k];
    if (!same) continue;
    for (Index k = 0; k < c; ++k) {
      const double d = static_cast<double>(output[p * c + k]) - static_cast<double>(target[p * c + k]);
      s += d * d;
    }
    count += c;
  }
  if (count > 0) r.structural_mse_outside_edit = s / static_cast<double>(count);
  return r;
}

std::vector<TaskRow> aggregate(const std::vector<VideoResult>& videos) {
  std::map<int, std::vector<const VideoResult*>> by_task;
  for (const auto& v : videos) {
    if (v.error.empty()) by_task[v.task_id].push_back(&v);
  }
  std::vector<TaskRow> rows;
  for (const auto& [task, list] : by_task) {
    TaskRow row;
    row.task_id = task;
    row.n_videos = static_cast<int>(list.size());
    row.psnr_min = kPsnrCap;
    double structural = 0.0;
    int structural_n = 0;
    for (const auto* v : list) {
      row.psnr_mean += v->psnr;
      row.psnr_min = std::min(row.psnr_min, v->psnr);
      row.frozen_frame_fraction += v->frozen_frame_fraction;
      row.motion_energy_ratio += v->motion_energy_ratio;
      if (v->structural_mse_outside_edit) {
        structural += *v->structural_mse_outside_edit;
        ++structural_n;
      }
    }
    const double n = static_cast<double>(list.size());
    row.psnr_mean /= n;
    row.frozen_frame_fraction /= n;
    row.motion_energy_ratio /= n;
    if (structural_n > 0) row.structural_mse_outside_edit = structural / structural_n;
    rows.push_back(row);
  }
  return rows;
}

json Report::to_json() const {
  json vids = json::array();
  for (const auto& v : videos) {
    vids.push_back({{"id", v.id},
                    {"task_id", v.task_id},
                    {"psnr", v.psnr},
                    {"mse", v.mse},
                    {"frozen_frame_fraction", v.frozen_frame_fraction},
                    {"motion_energy_ratio", v.motion_energy_ratio},
                    {"structural_mse_outside_edit", optional_json(v.structural_mse_outside_edit)},
                    {"error", v.error}});
  }
  json rs = json::array();
  for (const auto& r : rows) {
    rs.push_back({{"task_id", r.task_id},
                  {"n_videos", r.n_videos},
                  {"psnr_mean", r.psnr_mean},
                  {"psnr_min", r.psnr_min},
                  {"frozen_frame_fraction", r.frozen_frame_fraction},
                  {"motion_energy_ratio", r.motion_energy_ratio},
                  {"structural_mse_outside_edit", optional_json(r.structural_mse_outside_edit)}});
  }
  return {{"method", method}, {"rows", rs}, {"videos", vids}};
}

Report Report::from_json(const json& j) {
  Report r;
  r.method = j.at("method").get<std::string>();
  for (const auto& v : j.at("videos")) {
    r.videos.push_back({v.at("id").get<std::string>(), v.at("task_id").get<int>(), v.at("psnr").get<double>(),
                        v.at("mse").get<double>(), v.at("frozen_frame_fraction").get<double>(),
                        v.at("motion_energy_ratio").get<double>(),
                        optional_from(v.at("structural_mse_outside_edit")), v.at("error").get<std::string>()});
  }
  for (const auto& x : j.at("rows")) {
    r.rows.push_back({x.at("task_id").get<int>(), x.at("n_videos").get<int>(), x.at("psnr_mean").get<double>(),
                      x.at("psnr_min").get<double>(), x.at("frozen_frame_fraction").get<double>(),
                      x.at("motion_energy_ratio").get<double>(), optional_from(x.at("structural_mse_outside_edit"))});
  }
  return r;
}

std::string Report::to_csv() const {
  std::ostringstream out;
  out.precision(9);
  out << "method,task_id,n_videos,psnr_mean,psnr_min,frozen_frame_fraction,motion_energy_ratio,"
         "structural_mse_outside_edit\n";
  for (const auto& r : rows) {
    out << method << ',' << r.task_id << ',' << r.n_videos << ',' << r.psnr_mean << ',' << r.psnr_min << ','
        << r.frozen_frame_fraction << ',' << r.motion_energy_ratio << ',';
    if (r.structural_mse_outside_edit) out << *r.structural_mse_outside_edit;
    out << '\n';
  }
  return out.str();
}

std::uint64_t video_seed(std::uint64_t seed, std::size_t index) {
  std::uint64_t x = seed * 0x9e3779b97f4a7c15ULL + index + 1;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

Report evaluate(EditModel& model, const Dataset& eval_set, const EvalConfig& config, std::vector<Video>* outputs) {
  if (config.threads < 1) throw std::invalid_argument("threads must be >= 1");
  const std::size_t n = eval_set.pairs.size();
  Report report;
  report.method = method_name(model.method);
  report.videos.resize(n);
  std::vector<Video> produced(n);
  auto run = [&](std::size_t i) {
    const auto& e = eval_set.pairs[i];
    VideoResult& r = report.videos[i];
    try {
      const Video src = read_vvf(e.source);
      const Video tgt = read_vvf(e.target);
      SampleConfig sc = config.sample;
      sc.seed = video_seed(config.sample.seed, i);
      produced[i] = edit_video(src, e.task_id, model, sc);
      r = score_video(e.id, e.task_id, produced[i], tgt, src, config.tau);
    } catch (const std::exception& ex) {
      r.id = e.id;
      r.task_id = e.task_id;
      r.error = ex.what();
    }
  };
  // Each video is independent and writes only its own slot.
  const int workers = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(config.threads), n));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) run(i);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t i = static_cast<std::size_t>(w); i < n; i += static_cast<std::size_t>(workers)) run(i);
      });
    }
    for (auto& t : pool) t.join();
  }
  report.rows = aggregate(report.videos);
  if (outputs) *outputs = std::move(produced);
  return report;
}

}  // namespace vifeedit
