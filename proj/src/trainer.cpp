#include "vifeedit/trainer.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>

namespace vifeedit {

namespace {

std::uint64_t mix(std::uint64_t h, std::uint64_t v) {
  h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  h = (h ^ (h >> 31)) * 0xbf58476d1ce4e5b9ULL;
  return h ^ (h >> 29);
}

struct FrozenSnapshot {
  std::vector<Param<float>*> params;
  std::vector<Tensor<float>> values;
};

FrozenSnapshot snapshot_frozen(EditModel& model) {
  FrozenSnapshot s;
  for (auto* p : model.protected_params()) {
    s.params.push_back(p);
    s.values.push_back(p->value);
  }
  return s;
}

void check_frozen(const FrozenSnapshot& s, int epoch) {
  for (std::size_t i = 0; i < s.params.size(); ++i) {
    if (!s.params[i]->value.bit_equal(s.values[i])) {
      throw TrainingError("frozen parameter '" + s.params[i]->name + "' changed during epoch " +
                          std::to_string(epoch));
    }
  }
}

}  // namespace

AdamWConfig TrainConfig::adamw() const {
  AdamWConfig c;
  c.learning_rate = learning_rate;
  c.weight_decay = weight_decay;
  return c;
}

void TrainConfig::validate() const {
  if (schedule != "constant") throw std::invalid_argument("unsupported schedule '" + schedule + "' (only constant)");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be positive");
  if (weight_decay < 0.0) throw std::invalid_argument("weight decay must be >= 0");
  if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
  if (rank < 1) throw std::invalid_argument("rank must be >= 1");
}

template <typename Scalar>
FlowState<Scalar> noisy_interpolate(const Tensor<Scalar>& z0, const Tensor<Scalar>& eps, double t) {
  if (z0.shape() != eps.shape()) {
    throw ShapeError("noisy_interpolate: Z_0 " + shape_string(z0.shape()) + " vs noise " +
                     shape_string(eps.shape()));
  }
  if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("noisy_interpolate: t outside [0, 1]");
  FlowState<Scalar> s{z0, eps, t, z0, eps};
  const Scalar ts = static_cast<Scalar>(t), one_minus = static_cast<Scalar>(1.0 - t);
  s.zt.data() = ts * eps.data() + one_minus * z0.data();
  s.vt.data() = eps.data() - z0.data();
  return s;
}

template FlowState<float> noisy_interpolate(const Tensor<float>&, const Tensor<float>&, double);
template FlowState<double> noisy_interpolate(const Tensor<double>&, const Tensor<double>&, double);

std::mt19937_64 step_rng(std::uint64_t seed, int epoch, std::int64_t step) {
  return std::mt19937_64(mix(mix(mix(0x5eedULL, seed), static_cast<std::uint64_t>(epoch)),
                             static_cast<std::uint64_t>(step)));
}

TrainState init_train_state(EditModel& model, const TrainConfig& config) {
  TrainState s;
  const auto params = model.trainable();
  s.optimizer = OptimizerState<float>::for_params(params, config.adamw());
  return s;
}

double train_step(std::span<const TrainingPair> batch, EditModel& model, TrainState& state,
                  const TrainConfig& config, std::vector<LossRecord>* records) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  const ModelConfig& mc = model.config();
  const Index b = static_cast<Index>(batch.size());
  const Shape frame = batch[0].source.shape();
  for (const auto& p : batch) {
    if (p.source.shape() != frame || p.target.shape() != frame) {
      throw ShapeError("train_step: pairs must share one frame shape, got " + shape_string(p.source.shape()) +
                       " and " + shape_string(p.target.shape()));
    }
  }
  Shape video_shape = frame;
  video_shape.insert(video_shape.begin(), b);
  Tensor<float> src(video_shape), tgt(video_shape);
  const Index n = batch[0].source.size();
  std::vector<int> tasks;
  for (Index i = 0; i < b; ++i) {
    std::copy_n(batch[i].source.ptr(), n, src.ptr() + i * n);
    std::copy_n(batch[i].target.ptr(), n, tgt.ptr() + i * n);
    tasks.push_back(batch[i].task_id);
  }
  const Tensor<float> c_patches = to_patches(src, mc.patch);
  const Tensor<float> z0 = to_patches(tgt, mc.patch);
  const GridGeometry geo{frame[0], frame[1] / mc.patch, frame[2] / mc.patch};

  auto rng = step_rng(config.seed, state.epoch, state.step);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> t(static_cast<std::size_t>(b));
  for (auto& ti : t) ti = uniform(rng);
  Tensor<float> eps(z0.shape());
  for (Index i = 0; i < eps.size(); ++i) eps[i] = static_cast<float>(normal(rng));

  // Per-sample interpolants share one noise tensor; t differs per row.
  Tensor<float> zt(z0.shape()), vt(z0.shape());
  const Index per = z0.size() / b;
  for (Index i = 0; i < b; ++i) {
    const Shape one{per};
    const auto fs = noisy_interpolate(Tensor<float>(one, z0.data().segment(i * per, per)),
                                      Tensor<float>(one, eps.data().segment(i * per, per)), t[i]);
    zt.data().segment(i * per, per) = fs.zt.data();
    vt.data().segment(i * per, per) = fs.vt.data();
  }

  const auto params = model.trainable();
  zero_grads<float>(params);
  double loss = 0.0;
  try {
    Graph<float> g;
    auto pred = model.velocity(g, zt, c_patches, geo, tasks, t);
    auto l = fm_loss(pred, g.constant(vt));
    loss = l.value().item();
    g.backward(l);
    if (records) {
      std::map<int, std::pair<double, int>> per_task;
      const auto& pv = pred.value();
      for (Index i = 0; i < b; ++i) {
        const double e = (pv.data().segment(i * per, per) - vt.data().segment(i * per, per))
                             .template cast<double>()
                             .square()
                             .mean();
        auto& acc = per_task[tasks[static_cast<std::size_t>(i)]];
        acc.first += e;
        acc.second += 1;
      }
      for (const auto& [task, acc] : per_task) {
        records->push_back({state.step, state.epoch, task, acc.first / acc.second});
      }
    }
  } catch (const NonFiniteError& e) {
    throw TrainingError("non-finite value at step " + std::to_string(state.step) + ": " + e.what());
  }
  adamw_step<float>(params, state.optimizer);
  ++state.step;
  return loss;
}

std::vector<LossRecord> train(std::span<const TrainingPair> data, EditModel& model, TrainState& state,
                              const TrainConfig& config, const TrainOptions& options) {
  config.validate();
  if (data.empty()) throw std::invalid_argument("train: empty dataset");
  const FrozenSnapshot frozen = snapshot_frozen(model);
  std::vector<LossRecord> all;
  for (; state.epoch < config.epochs;) {
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 shuffle_rng = step_rng(config.seed ^ 0x5aull, state.epoch, -1);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    std::vector<LossRecord> epoch_records;
    double sum = 0.0;
    int steps = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      std::vector<TrainingPair> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + config.batch_size); ++i) {
        batch.push_back(data[order[i]]);
      }
      sum += train_step(batch, model, state, config, &epoch_records);
      ++steps;
    }
    check_frozen(frozen, state.epoch);
    ++state.epoch;
    if (!options.loss_csv.empty()) {
      const bool fresh = !std::filesystem::exists(options.loss_csv) ||
                         std::filesystem::file_size(options.loss_csv) == 0;
      std::ofstream out(options.loss_csv, std::ios::app);
      if (!out) throw std::runtime_error("cannot append to " + options.loss_csv.string());
      if (fresh) out << loss_csv_header();
      for (const auto& r : epoch_records) out << loss_csv_row(r);
    }
    if (!options.checkpoint_dir.empty()) {
      std::filesystem::create_directories(options.checkpoint_dir);
      save_checkpoint(options.checkpoint_dir / "latest.vfck", training_checkpoint(model, state, config));
    }
    all.insert(all.end(), epoch_records.begin(), epoch_records.end());
    if (options.on_epoch) options.on_epoch(state, sum / steps);
  }
  return all;
}

std::vector<TrainingPair> load_training_pairs(const Dataset& dataset) {
  std::vector<TrainingPair> out;
  for (const auto& e : dataset.pairs) {
    TrainingPair p{read_vvf(e.source), read_vvf(e.target), e.task_id};
    if (p.source.dim(0) != 1) {
      throw std::invalid_argument(e.source.string() + " has " + std::to_string(p.source.dim(0)) +
                                  " frames; training pairs are single frames");
    }
    if (p.source.shape() != p.target.shape()) {
      throw ShapeError("pair " + e.id + ": source and target shapes differ");
    }
    out.push_back(std::move(p));
  }
  return out;
}

void PretrainConfig::validate() const {
  if (steps < 0) throw std::invalid_argument("pretrain steps must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("pretrain batch size must be >= 1");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("pretrain learning rate must be positive");
  if (frames < 1) throw std::invalid_argument("pretrain frames must be >= 1");
  if (canvas < 1) throw std::invalid_argument("pretrain canvas must be >= 1");
}

void pretrain_backbone(BackboneParams<float>& base, const PretrainConfig& config,
                       const std::function<void(int, double)>& on_step) {
  config.validate();
  const ModelConfig& mc = base.config;
  if (config.frames > mc.max_frames) throw std::invalid_argument("pretrain frames exceed the model frame limit");
  if (config.canvas % mc.patch != 0) throw std::invalid_argument("pretrain canvas is not a multiple of the patch size");
  const auto params = base.params();
  std::vector<bool> flags;
  for (auto* p : params) {
    flags.push_back(p->trainable);
    p->trainable = true;
  }
  AdamWConfig ac;
  ac.learning_rate = config.learning_rate;
  ac.weight_decay = 0.0;
  OptimizerState<float> opt = OptimizerState<float>::for_params(params, ac);
  const int side = config.canvas;
  const Index b = config.batch_size;
  const Index per = static_cast<Index>(config.frames) * side * side * mc.channels;
  const GridGeometry geo{config.frames, side / mc.patch, side / mc.patch};
  const std::uint64_t scene_base = mix(config.seed, 0x70726574ULL);
  try {
    for (int s = 0; s < config.steps; ++s) {
      auto rng = step_rng(config.seed, -1, s);
      std::uniform_real_distribution<double> uniform(0.0, 1.0);
      std::normal_distribution<double> normal(0.0, 1.0);
      Tensor<float> videos({b, config.frames, side, side, mc.channels});
      std::vector<int> tasks;
      std::vector<double> t;
      for (Index i = 0; i < b; ++i) {
        const std::uint64_t index = static_cast<std::uint64_t>(s) * static_cast<std::uint64_t>(b) + i;
        const Video v = render_video(
            random_scene(ChannelPermute{}, scene_seed(scene_base, index, SeedDomain::train), config.frames));
        std::copy_n(v.ptr(), per, videos.ptr() + i * per);
        tasks.push_back(static_cast<int>(rng() % static_cast<std::uint64_t>(mc.num_tasks)));
        t.push_back(uniform(rng));
      }
      const Tensor<float> z0 = to_patches(videos, mc.patch);
      Tensor<float> zt(z0.shape()), vt(z0.shape());
      const Index n = z0.size() / b;
      for (Index i = 0; i < b; ++i) {
        const float ts = static_cast<float>(t[i]), keep = static_cast<float>(1.0 - t[i]);
        for (Index k = i * n; k < (i + 1) * n; ++k) {
          const float e = static_cast<float>(normal(rng));
          zt[k] = ts * e + keep * z0[k];
          vt[k] = e - z0[k];
        }
      }
      zero_grads<float>(params);
      Graph<float> g;
      auto loss = fm_loss(forward_velocity(g, base, zt, geo, tasks, t), g.constant(vt));
      g.backward(loss);
      adamw_step<float>(params, opt);
      if (on_step) on_step(s + 1, loss.value().item());
    }
  } catch (const NonFiniteError& e) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->trainable = flags[i];
    throw TrainingError(std::string("non-finite value during backbone pretraining: ") + e.what());
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->trainable = flags[i];
}

Checkpoint training_checkpoint(EditModel& model, const TrainState& state, const TrainConfig& config) {
  nlohmann::json meta = {{"epoch", state.epoch},
                         {"step", state.step},
                         {"train",
                          {{"lr", config.learning_rate},
                           {"weight_decay", config.weight_decay},
                           {"schedule", config.schedule},
                           {"rank", config.rank},
                           {"epochs", config.epochs},
                           {"batch_size", config.batch_size},
                           {"seed", config.seed}}}};
  return model_checkpoint(model, &state.optimizer, meta);
}

EditModel resume_from(const Checkpoint& ck, TrainState& state, const TrainConfig& config) {
  state = TrainState{};
  state.optimizer.config = config.adamw();
  EditModel m = load_model(ck, &state.optimizer);
  state.epoch = ck.metadata.value("epoch", 0);
  state.step = ck.metadata.value("step", std::int64_t{0});
  if (!ck.metadata.contains("optimizer_step")) {
    const auto params = m.trainable();
    state.optimizer = OptimizerState<float>::for_params(params, config.adamw());
  }
  return m;
}

std::string loss_csv_header() { return "step,epoch,task_id,loss\n"; }

std::string loss_csv_row(const LossRecord& r) {
  char buf[96];
  std::snprintf(buf, sizeof(buf), "%lld,%d,%d,%.9g\n", static_cast<long long>(r.step), r.epoch, r.task_id,
                r.loss);
  return buf;
}

}  // namespace vifeedit
