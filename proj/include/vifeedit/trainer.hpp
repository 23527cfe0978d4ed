#pragma once

#include "vifeedit/model.hpp"
#include "vifeedit/synth.hpp"

#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

namespace vifeedit {

struct TrainConfig {
  double learning_rate = 1e-4;
  double weight_decay = 0.01;
  std::string schedule = "constant";
  int rank = kDefaultRank;
  int epochs = 20;
  int batch_size = 8;
  std::uint64_t seed = 0;

  AdamWConfig adamw() const;
  void validate() const;
};

struct TrainingPair {
  Video source;  // [1, H, W, 3]
  Video target;
  int task_id = 0;
};

template <typename Scalar>
struct FlowState {
  Tensor<Scalar> z0;
  Tensor<Scalar> eps;
  double t = 0.0;
  Tensor<Scalar> zt;  // t * eps + (1 - t) * z0
  Tensor<Scalar> vt;  // eps - z0
};

template <typename Scalar>
FlowState<Scalar> noisy_interpolate(const Tensor<Scalar>& z0, const Tensor<Scalar>& eps, double t);

/// Mean squared error over every element of the batch.
template <typename Scalar>
Var<Scalar> fm_loss(Var<Scalar> v_pred, Var<Scalar> v_target) {
  return mse(v_pred, v_target);
}

struct LossRecord {
  std::int64_t step = 0;
  int epoch = 0;
  int task_id = 0;
  double loss = 0.0;
};

struct TrainState {
  int epoch = 0;  // epochs completed
  std::int64_t step = 0;
  OptimizerState<float> optimizer;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Noise and timestep stream of one optimizer step.
std::mt19937_64 step_rng(std::uint64_t seed, int epoch, std::int64_t step);

TrainState init_train_state(EditModel& model, const TrainConfig& config);

/// One optimizer step on `batch`: t ~ U[0, 1] and eps ~ N(0, I) per sample,
/// velocity loss on the z stream, AdamW over the trainable set. Returns the
/// batch loss; per-task means are appended to `records`.
double train_step(std::span<const TrainingPair> batch, EditModel& model, TrainState& state,
                  const TrainConfig& config, std::vector<LossRecord>* records = nullptr);

struct TrainOptions {
  /// latest.vfck is rewritten here after every epoch when non-empty.
  std::filesystem::path checkpoint_dir;
  /// Rows are appended after every epoch when non-empty.
  std::filesystem::path loss_csv;
  std::function<void(const TrainState&, double epoch_mean_loss)> on_epoch;
};

/// Runs epochs state.epoch .. config.epochs - 1 with seeded per-epoch
/// shuffling. Verifies after each epoch that every protected parameter is
/// bit-identical to its value at entry and throws TrainingError otherwise.
std::vector<LossRecord> train(std::span<const TrainingPair> data, EditModel& model, TrainState& state,
                              const TrainConfig& config, const TrainOptions& options = {});

std::vector<TrainingPair> load_training_pairs(const Dataset& dataset);

/// Flow-matching training of the backbone itself on procedural multi-frame
/// videos with random prompt rows. Produces the frozen base the adapters are
/// trained against.
struct PretrainConfig {
  int steps = 3000;
  int batch_size = 4;
  double learning_rate = 1e-3;
  int frames = 8;
  int canvas = 32;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Trains every backbone parameter in place, then restores the trainable
/// flags it found. `on_step` receives (completed steps, loss).
void pretrain_backbone(BackboneParams<float>& base, const PretrainConfig& config,
                       const std::function<void(int, double)>& on_step = {});

Checkpoint training_checkpoint(EditModel& model, const TrainState& state, const TrainConfig& config);
/// Restores model and training state written by training_checkpoint.
EditModel resume_from(const Checkpoint& ck, TrainState& state, const TrainConfig& config);

std::string loss_csv_header();
std::string loss_csv_row(const LossRecord& r);

}  // namespace vifeedit
