#pragma once

#include "vifeedit/model.hpp"
#include "vifeedit/synth.hpp"

#include <functional>
#include <random>
#include <stdexcept>

namespace vifeedit {

struct SampleConfig {
  int steps = 50;
  double alpha = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Z_alpha = (1 - alpha) C + alpha eps with fresh standard-normal eps.
template <typename Scalar>
Tensor<Scalar> sdedit_init(const Tensor<Scalar>& c, double alpha, std::mt19937_64& rng) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("alpha outside [0, 1]");
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor<Scalar> z(c.shape());
  const Scalar a = static_cast<Scalar>(alpha), keep = static_cast<Scalar>(1.0 - alpha);
  for (Index i = 0; i < z.size(); ++i) z[i] = keep * c[i] + a * static_cast<Scalar>(normal(rng));
  return z;
}

template <typename Scalar>
using VelocityField = std::function<Tensor<Scalar>(const Tensor<Scalar>& z, double t)>;

/// Explicit Euler from t_start down to 0 on a uniform grid, evaluating the
/// field at the left end of each interval: t_i = t_start - i * dt.
template <typename Scalar>
Tensor<Scalar> euler_integrate(Tensor<Scalar> z, double t_start, int steps, const VelocityField<Scalar>& u) {
  if (t_start < 0.0 || t_start > 1.0) throw std::invalid_argument("t_start outside [0, 1]");
  if (steps < 0) throw std::invalid_argument("negative step count");
  if (t_start == 0.0) return z;
  if (steps == 0) throw std::invalid_argument("steps = 0 with a nonzero start time");
  const double dt = t_start / steps;
  for (int i = 0; i < steps; ++i) {
    const double t = t_start - i * dt;
    const Tensor<Scalar> v = u(z, t);
    if (v.shape() != z.shape()) throw ShapeError("velocity field changed the state shape");
    z.data() -= static_cast<Scalar>(dt) * v.data();
  }
  return z;
}

struct EditProbe {
  /// c-stream timestep embeddings seen at every integration step.
  std::vector<Tensor<float>> c_time;
};

/// SDEdit init from the patchified source, Euler integration of the
/// dual-path velocity, pixel output clamped to [0, 1]. alpha = 0 returns the
/// source unchanged.
Video edit_video(const Video& source, int task_id, EditModel& model, const SampleConfig& config,
                 EditProbe* probe = nullptr);

}  // namespace vifeedit
