#include "vifeedit/kernels.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

namespace vifeedit {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Index shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

namespace detail {

Shape broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    const Index ea = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const Index eb = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeError(std::string(op) + ": shapes " + shape_string(a) + " and " +
                       shape_string(b) + " are not broadcastable");
    }
    out[i] = std::max(ea, eb);
  }
  return out;
}

namespace {

/// For every linear index of `out`, the linear index of the broadcast source
/// with shape `in` (right-aligned).
std::vector<Index> broadcast_source_index(const Shape& out, const Shape& in) {
  const Index n = shape_numel(out);
  std::vector<Index> result(static_cast<std::size_t>(n), 0);
  if (in.empty() || shape_numel(in) == 1) return result;
  const std::size_t r = out.size();
  const std::size_t off = r - in.size();
  std::vector<Index> in_stride(r, 0);
  Index s = 1;
  for (std::size_t i = r; i-- > off;) {
    const Index e = in[i - off];
    in_stride[i] = e == 1 ? 0 : s;
    s *= e;
  }
  std::vector<Index> counter(r, 0);
  Index src = 0;
  for (Index li = 0; li < n; ++li) {
    result[static_cast<std::size_t>(li)] = src;
    for (std::size_t ax = r; ax-- > 0;) {
      if (++counter[ax] < out[ax]) {
        src += in_stride[ax];
        break;
      }
      src -= in_stride[ax] * (out[ax] - 1);
      counter[ax] = 0;
    }
  }
  return result;
}

struct MatmulPlan {
  Shape out_shape;
  Index m = 0, k = 0, n = 0, batches = 0;
  std::vector<Index> a_batch, b_batch;
};

template <typename Scalar>
MatmulPlan plan_matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.rank() < 2 || b.rank() < 2 || a.dim(-1) != b.dim(-2)) {
    throw ShapeError("matmul: incompatible shapes " + shape_string(a.shape()) + " and " +
                     shape_string(b.shape()));
  }
  MatmulPlan plan;
  plan.m = a.dim(-2);
  plan.k = a.dim(-1);
  plan.n = b.dim(-1);
  const Shape ab(a.shape().begin(), a.shape().end() - 2);
  const Shape bb(b.shape().begin(), b.shape().end() - 2);
  Shape batch = broadcast_shapes(ab, bb, "matmul");
  plan.batches = shape_numel(batch);
  plan.a_batch = broadcast_source_index(batch, ab);
  plan.b_batch = broadcast_source_index(batch, bb);
  plan.out_shape = batch;
  plan.out_shape.push_back(plan.m);
  plan.out_shape.push_back(plan.n);
  return plan;
}

}  // namespace

template <typename Scalar>
void matmul_backward(const Tensor<Scalar>& a, const Tensor<Scalar>& b,
                     const Tensor<Scalar>& grad_out, Tensor<Scalar>* grad_a,
                     Tensor<Scalar>* grad_b) {
  const MatmulPlan p = plan_matmul(a, b);
  if (grad_a) *grad_a = Tensor<Scalar>::zeros(a.shape());
  if (grad_b) *grad_b = Tensor<Scalar>::zeros(b.shape());
  for (Index i = 0; i < p.batches; ++i) {
    const auto ia = p.a_batch[static_cast<std::size_t>(i)];
    const auto ib = p.b_batch[static_cast<std::size_t>(i)];
    typename Tensor<Scalar>::ConstMatrixMap g(grad_out.ptr() + i * p.m * p.n, p.m, p.n);
    typename Tensor<Scalar>::ConstMatrixMap am(a.ptr() + ia * p.m * p.k, p.m, p.k);
    typename Tensor<Scalar>::ConstMatrixMap bm(b.ptr() + ib * p.k * p.n, p.k, p.n);
    if (grad_a) {
      typename Tensor<Scalar>::MatrixMap ga(grad_a->ptr() + ia * p.m * p.k, p.m, p.k);
      ga.noalias() += g * bm.transpose();
    }
    if (grad_b) {
      typename Tensor<Scalar>::MatrixMap gb(grad_b->ptr() + ib * p.k * p.n, p.k, p.n);
      gb.noalias() += am.transpose() * g;
    }
  }
}

template <typename Scalar>
void attention_backward(const Tensor<Scalar>& q, const Tensor<Scalar>& k,
                        const Tensor<Scalar>& v, const Tensor<Scalar>& probs,
                        const Tensor<Scalar>& grad_out, Tensor<Scalar>* grad_q,
                        Tensor<Scalar>* grad_k, Tensor<Scalar>* grad_v) {
  using RowMatrix = typename Tensor<Scalar>::RowMatrix;
  using CMap = typename Tensor<Scalar>::ConstMatrixMap;
  using Map = typename Tensor<Scalar>::MatrixMap;
  const Index b = q.dim(0), s = q.dim(1), d = q.dim(2), sk = k.dim(1), dv = v.dim(2);
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(d));
  if (grad_q) *grad_q = Tensor<Scalar>::zeros(q.shape());
  if (grad_k) *grad_k = Tensor<Scalar>::zeros(k.shape());
  if (grad_v) *grad_v = Tensor<Scalar>::zeros(v.shape());
  RowMatrix dp(s, sk);
  for (Index i = 0; i < b; ++i) {
    CMap pm(probs.ptr() + i * s * sk, s, sk);
    CMap go(grad_out.ptr() + i * s * dv, s, dv);
    CMap qm(q.ptr() + i * s * d, s, d);
    CMap km(k.ptr() + i * sk * d, sk, d);
    CMap vm(v.ptr() + i * sk * dv, sk, dv);
    if (grad_v) Map(grad_v->ptr() + i * sk * dv, sk, dv).noalias() = pm.transpose() * go;
    if (!grad_q && !grad_k) continue;
    dp.noalias() = go * vm.transpose();
    // dS = P * (dP - rowsum(dP * P))
    const auto row_dot = (dp.array() * pm.array()).rowwise().sum().eval();
    dp = (pm.array() * (dp.array().colwise() - row_dot)).matrix() * scale;
    if (grad_q) Map(grad_q->ptr() + i * s * d, s, d).noalias() = dp * km;
    if (grad_k) Map(grad_k->ptr() + i * sk * d, sk, d).noalias() = dp.transpose() * qm;
  }
}

template <typename Scalar>
void rms_norm_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& gain,
                       const Tensor<Scalar>& grad_out, double eps,
                       Tensor<Scalar>* grad_x, Tensor<Scalar>* grad_gain) {
  const Index d = x.dim(-1);
  const Index rows = x.size() / d;
  const auto xm = x.rows_view();
  const auto gm = grad_out.rows_view();
  const auto g = gain.data().matrix().transpose();
  if (grad_x) *grad_x = Tensor<Scalar>::zeros(x.shape());
  if (grad_gain) *grad_gain = Tensor<Scalar>::zeros(gain.shape());
  for (Index r = 0; r < rows; ++r) {
    const Scalar ms = xm.row(r).squaredNorm() / static_cast<Scalar>(d);
    const Scalar inv = Scalar(1) / std::sqrt(ms + static_cast<Scalar>(eps));
    if (grad_gain) {
      grad_gain->data().matrix().transpose() += (gm.row(r).array() * xm.row(r).array() * inv).matrix();
    }
    if (grad_x) {
      const auto gy = (gm.row(r).array() * g.array()).eval();
      const Scalar dot = (gy * xm.row(r).array()).sum();
      grad_x->rows_view().row(r) =
          (gy * inv - xm.row(r).array() * (dot * inv * inv * inv / static_cast<Scalar>(d)))
              .matrix();
    }
  }
}

}  // namespace detail

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  const detail::MatmulPlan p = detail::plan_matmul(a, b);
  Tensor<Scalar> out(p.out_shape);
  for (Index i = 0; i < p.batches; ++i) {
    typename Tensor<Scalar>::ConstMatrixMap am(
        a.ptr() + p.a_batch[static_cast<std::size_t>(i)] * p.m * p.k, p.m, p.k);
    typename Tensor<Scalar>::ConstMatrixMap bm(
        b.ptr() + p.b_batch[static_cast<std::size_t>(i)] * p.k * p.n, p.k, p.n);
    out.matrix(p.batches * p.m, p.n).middleRows(i * p.m, p.m).noalias() = am * bm;
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> project_rows(const Tensor<Scalar>& x, const Tensor<Scalar>& weight) {
  if (weight.rank() != 2 || x.rank() < 1 || x.dim(-1) != weight.dim(1)) {
    throw ShapeError("project_rows: input " + shape_string(x.shape()) + " incompatible with weight " +
                     shape_string(weight.shape()));
  }
  constexpr Index kBlock = 64;
  Shape shape = x.shape();
  shape.back() = weight.dim(0);
  Tensor<Scalar> out(shape);
  const auto xm = x.rows_view();
  auto om = out.rows_view();
  const auto wt = weight.rows_view().transpose();
  const Index rows = xm.rows();
  const Index full = rows - rows % kBlock;
  for (Index r = 0; r < full; r += kBlock) {
    om.middleRows(r, kBlock).noalias() = xm.middleRows(r, kBlock) * wt;
  }
  if (full < rows) {
    using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Mat padded = Mat::Zero(kBlock, xm.cols());
    padded.topRows(rows - full) = xm.middleRows(full, rows - full);
    Mat prod(kBlock, om.cols());
    prod.noalias() = padded * wt;
    om.middleRows(full, rows - full) = prod.topRows(rows - full);
  }
  return out;
}

namespace {

/// In-place row softmax of a row-major matrix.
template <typename Matrix>
void softmax_rows(Matrix&& m) {
  for (Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r).array();
    row = (row - row.maxCoeff()).exp();
    row /= row.sum();
  }
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> softmax_lastdim(const Tensor<Scalar>& x) {
  if (x.rank() < 1) throw ShapeError("softmax_lastdim: empty tensor");
  require_finite(x, "softmax_lastdim input");
  Tensor<Scalar> out(x.shape());
  auto in = x.rows_view();
  auto o = out.rows_view();
  o = in;
  softmax_rows(o);
  return out;
}

template <typename Scalar>
Tensor<Scalar> scaled_dot_attention(const Tensor<Scalar>& q, const Tensor<Scalar>& k,
                                    const Tensor<Scalar>& v, Tensor<Scalar>* probs) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3) {
    throw ShapeError("scaled_dot_attention expects rank-3 Q, K, V; got " +
                     shape_string(q.shape()) + ", " + shape_string(k.shape()) + ", " +
                     shape_string(v.shape()));
  }
  const Index b = q.dim(0), s = q.dim(1), d = q.dim(2), sk = k.dim(1), dv = v.dim(2);
  if (k.dim(0) != b || v.dim(0) != b || k.dim(2) != d || v.dim(1) != sk) {
    throw ShapeError("scaled_dot_attention: shape mismatch Q " + shape_string(q.shape()) +
                     ", K " + shape_string(k.shape()) + ", V " + shape_string(v.shape()));
  }
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(d));
  Tensor<Scalar> out({b, s, dv});
  if (probs) *probs = Tensor<Scalar>({b, s, sk});
  typename Tensor<Scalar>::RowMatrix logits(s, sk);
  for (Index i = 0; i < b; ++i) {
    typename Tensor<Scalar>::ConstMatrixMap qm(q.ptr() + i * s * d, s, d);
    typename Tensor<Scalar>::ConstMatrixMap km(k.ptr() + i * sk * d, sk, d);
    typename Tensor<Scalar>::ConstMatrixMap vm(v.ptr() + i * sk * dv, sk, dv);
    logits.noalias() = (qm * km.transpose()) * scale;
    softmax_rows(logits);
    typename Tensor<Scalar>::MatrixMap om(out.ptr() + i * s * dv, s, dv);
    om.noalias() = logits * vm;
    if (probs) probs->matrix(b * s, sk).middleRows(i * s, s) = logits;
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> rope_rotate(const Tensor<Scalar>& tokens, const Tensor<Scalar>& angles,
                           int direction) {
  if (tokens.rank() != 3) {
    throw ShapeError("rope_rotate expects tokens [b, s, d], got " +
                     shape_string(tokens.shape()));
  }
  const Index b = tokens.dim(0), s = tokens.dim(1), d = tokens.dim(2);
  if (d % 2 != 0) {
    throw ShapeError("rope_rotate: channel count must be even, got " + std::to_string(d));
  }
  if (angles.rank() != 2 || angles.dim(0) != s || angles.dim(1) != d / 2) {
    throw ShapeError("rope_rotate: angles " + shape_string(angles.shape()) +
                     " do not match tokens " + shape_string(tokens.shape()));
  }
  const Index half = d / 2;
  Eigen::Array<Scalar, Eigen::Dynamic, 1> c = angles.data().cos();
  Eigen::Array<Scalar, Eigen::Dynamic, 1> sn = angles.data().sin();
  if (direction < 0) sn = -sn;
  Tensor<Scalar> out(tokens.shape());
  const Scalar* in = tokens.ptr();
  Scalar* o = out.ptr();
  for (Index bi = 0; bi < b; ++bi) {
    for (Index si = 0; si < s; ++si) {
      const Index base = (bi * s + si) * d;
      for (Index j = 0; j < half; ++j) {
        const Scalar x0 = in[base + 2 * j], x1 = in[base + 2 * j + 1];
        const Scalar cj = c[si * half + j], sj = sn[si * half + j];
        o[base + 2 * j] = x0 * cj - x1 * sj;
        o[base + 2 * j + 1] = x0 * sj + x1 * cj;
      }
    }
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> rms_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gain, double eps) {
  if (x.rank() < 1 || gain.size() != x.dim(-1)) {
    throw ShapeError("rms_norm: gain " + shape_string(gain.shape()) +
                     " does not match input " + shape_string(x.shape()));
  }
  const Index d = x.dim(-1);
  Tensor<Scalar> out(x.shape());
  const auto xm = x.rows_view();
  auto om = out.rows_view();
  const auto ms = (xm.rowwise().squaredNorm().array() / static_cast<Scalar>(d)).eval();
  const auto inv = (ms + static_cast<Scalar>(eps)).rsqrt().eval();
  om = (xm.array().colwise() * inv).rowwise() * gain.data().transpose();
  return out;
}

#define VIFEEDIT_INSTANTIATE(S)                                                            \
  template Tensor<S> matmul(const Tensor<S>&, const Tensor<S>&);                           \
  template Tensor<S> project_rows(const Tensor<S>&, const Tensor<S>&);                      \
  template Tensor<S> softmax_lastdim(const Tensor<S>&);                                    \
  template Tensor<S> scaled_dot_attention(const Tensor<S>&, const Tensor<S>&,              \
                                          const Tensor<S>&, Tensor<S>*);                   \
  template Tensor<S> rope_rotate(const Tensor<S>&, const Tensor<S>&, int);                 \
  template Tensor<S> rms_norm(const Tensor<S>&, const Tensor<S>&, double);                 \
  template void detail::matmul_backward(const Tensor<S>&, const Tensor<S>&,                \
                                        const Tensor<S>&, Tensor<S>*, Tensor<S>*);         \
  template void detail::attention_backward(const Tensor<S>&, const Tensor<S>&,             \
                                           const Tensor<S>&, const Tensor<S>&,             \
                                           const Tensor<S>&, Tensor<S>*, Tensor<S>*,       \
                                           Tensor<S>*);                                    \
  template void detail::rms_norm_backward(const Tensor<S>&, const Tensor<S>&,              \
                                          const Tensor<S>&, double, Tensor<S>*, Tensor<S>*);

VIFEEDIT_INSTANTIATE(float)
VIFEEDIT_INSTANTIATE(double)

#undef VIFEEDIT_INSTANTIATE

}  // namespace vifeedit
