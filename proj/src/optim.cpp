#include "vifeedit/optim.hpp"

#include <cmath>

namespace vifeedit {

template <typename Scalar>
OptimizerState<Scalar> OptimizerState<Scalar>::for_params(std::span<Param<Scalar>* const> params,
                                                          AdamWConfig config) {
  OptimizerState s;
  s.config = config;
  for (const auto* p : params) {
    s.first_moment.push_back(Tensor<Scalar>::zeros(p->value.shape()));
    s.second_moment.push_back(Tensor<Scalar>::zeros(p->value.shape()));
  }
  return s;
}

template <typename Scalar>
void adamw_step(std::span<Param<Scalar>* const> params, OptimizerState<Scalar>& state) {
  if (state.first_moment.size() != params.size() || state.second_moment.size() != params.size()) {
    throw ShapeError("adamw_step: optimizer state tracks " +
                     std::to_string(state.first_moment.size()) + " tensors but " +
                     std::to_string(params.size()) + " params were given");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = *params[i];
    if (state.first_moment[i].shape() != p.value.shape() ||
        state.second_moment[i].shape() != p.value.shape()) {
      throw ShapeError("adamw_step: moment shape " + shape_string(state.first_moment[i].shape()) +
                       " does not match param '" + p.name + "' " + shape_string(p.value.shape()));
    }
    if (p.trainable && p.grad.shape() != p.value.shape()) {
      throw ShapeError("adamw_step: gradient of '" + p.name + "' has wrong shape");
    }
  }
  state.step += 1;
  const auto& c = state.config;
  const Scalar lr = static_cast<Scalar>(c.learning_rate);
  const Scalar b1 = static_cast<Scalar>(c.beta1);
  const Scalar b2 = static_cast<Scalar>(c.beta2);
  const Scalar bc1 = Scalar(1) - static_cast<Scalar>(std::pow(c.beta1, static_cast<double>(state.step)));
  const Scalar bc2 = Scalar(1) - static_cast<Scalar>(std::pow(c.beta2, static_cast<double>(state.step)));
  const Scalar decay = Scalar(1) - lr * static_cast<Scalar>(c.weight_decay);
  const Scalar step_size = lr / bc1;
  const Scalar bc2_sqrt = std::sqrt(bc2);
  const Scalar eps = static_cast<Scalar>(c.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Param<Scalar>& p = *params[i];
    if (!p.trainable) continue;
    auto& m = state.first_moment[i].data();
    auto& v = state.second_moment[i].data();
    const auto& g = p.grad.data();
    auto& w = p.value.data();
    w *= decay;
    m = b1 * m + (Scalar(1) - b1) * g;
    v = b2 * v + (Scalar(1) - b2) * g.square();
    w -= step_size * m / (v.sqrt() / bc2_sqrt + eps);
    require_finite(p.value, "adamw_step(" + p.name + ")");
  }
}

template struct OptimizerState<float>;
template struct OptimizerState<double>;
template void adamw_step(std::span<Param<float>* const>, OptimizerState<float>&);
template void adamw_step(std::span<Param<double>* const>, OptimizerState<double>&);

}  // namespace vifeedit
