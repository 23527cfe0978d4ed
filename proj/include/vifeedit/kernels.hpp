#pragma once

#include "vifeedit/tensor.hpp"

namespace vifeedit {

/// Batched matrix product a[..., m, k] x b[..., k, n] -> [..., m, n]. Leading
/// batch extents broadcast numpy-style.
template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

/// x[..., k] times weight[n, k]^T -> [..., n]. Rows are multiplied in
/// fixed-size blocks so each output row is bit-identical no matter how many
/// other rows share the call.
template <typename Scalar>
Tensor<Scalar> project_rows(const Tensor<Scalar>& x, const Tensor<Scalar>& weight);

/// Softmax over the last axis with max subtraction.
template <typename Scalar>
Tensor<Scalar> softmax_lastdim(const Tensor<Scalar>& x);

/// Softmax(Q K^T / sqrt(d')) V per batch slice. Q: [b, s, d'], K: [b, s', d'],
/// V: [b, s', dv]. When `probs` is non-null the attention weights [b, s, s']
/// are written there for reuse in the backward pass.
template <typename Scalar>
Tensor<Scalar> scaled_dot_attention(const Tensor<Scalar>& q, const Tensor<Scalar>& k,
                                    const Tensor<Scalar>& v,
                                    Tensor<Scalar>* probs = nullptr);

/// Rotates consecutive channel pairs (2i, 2i+1) of tokens[b, s, d] by
/// angles[s, i]. A negative `direction` applies the inverse rotation.
template <typename Scalar>
Tensor<Scalar> rope_rotate(const Tensor<Scalar>& tokens, const Tensor<Scalar>& angles,
                           int direction = 1);

inline constexpr double kRmsNormEps = 1e-6;

/// x / sqrt(mean(x^2) + eps) * gain over the last axis.
template <typename Scalar>
Tensor<Scalar> rms_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gain,
                        double eps = kRmsNormEps);

namespace detail {

/// Gradients of scaled_dot_attention given the saved weights.
template <typename Scalar>
void attention_backward(const Tensor<Scalar>& q, const Tensor<Scalar>& k,
                        const Tensor<Scalar>& v, const Tensor<Scalar>& probs,
                        const Tensor<Scalar>& grad_out, Tensor<Scalar>* grad_q,
                        Tensor<Scalar>* grad_k, Tensor<Scalar>* grad_v);

template <typename Scalar>
void rms_norm_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& gain,
                       const Tensor<Scalar>& grad_out, double eps,
                       Tensor<Scalar>* grad_x, Tensor<Scalar>* grad_gain);

/// grad_a / grad_b for matmul, reduced over broadcast batch axes.
template <typename Scalar>
void matmul_backward(const Tensor<Scalar>& a, const Tensor<Scalar>& b,
                     const Tensor<Scalar>& grad_out, Tensor<Scalar>* grad_a,
                     Tensor<Scalar>* grad_b);

/// Broadcast shape of two shapes (right-aligned). Throws ShapeError.
Shape broadcast_shapes(const Shape& a, const Shape& b, const char* op);

}  // namespace detail
}  // namespace vifeedit
