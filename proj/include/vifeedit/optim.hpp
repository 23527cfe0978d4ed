#pragma once

#include "vifeedit/autograd.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace vifeedit {

struct AdamWConfig {
  double learning_rate = 1e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moments are aligned by position with the parameter list the state was
/// created for.
template <typename Scalar>
struct OptimizerState {
  AdamWConfig config;
  std::int64_t step = 0;
  std::vector<Tensor<Scalar>> first_moment;
  std::vector<Tensor<Scalar>> second_moment;

  static OptimizerState for_params(std::span<Param<Scalar>* const> params, AdamWConfig config);
};

/// One decoupled-weight-decay Adam step over the trainable entries of
/// `params`. Frozen parameters are left untouched.
template <typename Scalar>
void adamw_step(std::span<Param<Scalar>* const> params, OptimizerState<Scalar>& state);

template <typename Scalar>
void zero_grads(std::span<Param<Scalar>* const> params) {
  for (auto* p : params) p->zero_grad();
}

}  // namespace vifeedit
