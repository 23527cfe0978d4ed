#pragma once

#include "vifeedit/autograd.hpp"

#include <cstdint>
#include <random>

namespace vifeedit {

inline constexpr double kLoraDownStd = 0.02;

/// Low-rank additive delta scaling * up * down on a linear map. `up` starts
/// at zero so the delta is the zero map until trained.
template <typename Scalar>
struct LoraDelta {
  Param<Scalar> down;  // [rank, d_in]
  Param<Scalar> up;    // [d_out, rank]
  int rank = 0;
  double scaling = 1.0;

  Index in_features() const { return down.value.dim(1); }
  Index out_features() const { return up.value.dim(0); }
  Index element_count() const { return down.value.size() + up.value.size(); }

  /// x[..., d_in] -> delta(x)[..., d_out]
  Var<Scalar> apply(Var<Scalar> x) {
    auto& g = x.graph();
    auto y = linear(linear(x, g.param(down)), g.param(up));
    return scaling == 1.0 ? y : scale(y, scaling);
  }

  template <typename F>
  void visit(F&& f) {
    f(down);
    f(up);
  }

  template <typename Other>
  LoraDelta<Other> cast() const {
    return {down.template cast<Other>(), up.template cast<Other>(), rank, scaling};
  }
};

/// Throws std::invalid_argument when rank <= 0 or rank > min(d_in, d_out).
template <typename Scalar>
LoraDelta<Scalar> make_lora(const std::string& name, Index d_in, Index d_out, int rank,
                            std::mt19937_64& rng) {
  if (rank <= 0 || rank > std::min(d_in, d_out)) {
    throw std::invalid_argument("LoRA rank " + std::to_string(rank) + " invalid for " + name + " (" +
                                std::to_string(d_in) + " -> " + std::to_string(d_out) + ")");
  }
  std::normal_distribution<double> nd(0.0, kLoraDownStd);
  Tensor<Scalar> down({rank, d_in});
  for (Index i = 0; i < down.size(); ++i) down[i] = static_cast<Scalar>(nd(rng));
  LoraDelta<Scalar> d;
  d.down = Param<Scalar>(name + ".down", std::move(down), true, ParamRole::delta);
  d.up = Param<Scalar>(name + ".up", Tensor<Scalar>::zeros({d_out, rank}), true, ParamRole::delta);
  d.rank = rank;
  return d;
}

}  // namespace vifeedit
