#include "vifeedit/autograd.hpp"

#include <cmath>
#include <memory>
#include <numbers>

namespace vifeedit {

template <typename Scalar>
Var<Scalar> Graph<Scalar>::constant(Tensor<Scalar> value) {
  Node n;
  n.value = std::move(value);
  n.op = "constant";
  nodes_.push_back(std::move(n));
  return Var<Scalar>(this, static_cast<int>(nodes_.size()) - 1);
}

template <typename Scalar>
Var<Scalar> Graph<Scalar>::param(Param<Scalar>& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) {
    return Var<Scalar>(this, it->second);
  }
  Node n;
  n.value = p.value;
  n.requires_grad = grad_enabled_ && p.trainable;
  n.param = &p;
  n.op = "param";
  nodes_.push_back(std::move(n));
  param_nodes_.emplace(&p, static_cast<int>(nodes_.size()) - 1);
  return Var<Scalar>(this, static_cast<int>(nodes_.size()) - 1);
}

template <typename Scalar>
Var<Scalar> Graph<Scalar>::record(const char* op, Tensor<Scalar> value,
                                  std::span<const Var<Scalar>> inputs, BackwardFn backward) {
  require_finite(value, op);
  Node n;
  n.value = std::move(value);
  n.op = op;
  if (grad_enabled_) {
    for (const auto& in : inputs) {
      if (in.requires_grad()) {
        n.requires_grad = true;
        break;
      }
    }
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var<Scalar>(this, static_cast<int>(nodes_.size()) - 1);
}

template <typename Scalar>
void Graph<Scalar>::accumulate(const Var<Scalar>& v, const Tensor<Scalar>& g) {
  Node& n = nodes_[static_cast<std::size_t>(v.id())];
  if (!n.requires_grad) return;
  if (g.shape() != n.value.shape()) {
    throw ShapeError(std::string("gradient shape ") + shape_string(g.shape()) +
                     " does not match value " + shape_string(n.value.shape()) + " of '" + n.op +
                     "'");
  }
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad.data() += g.data();
  }
}

template <typename Scalar>
void Graph<Scalar>::accumulate(const Var<Scalar>& v, Tensor<Scalar>&& g) {
  Node& n = nodes_[static_cast<std::size_t>(v.id())];
  if (n.requires_grad && n.grad.size() == 0 && g.shape() == n.value.shape()) {
    n.grad = std::move(g);
    return;
  }
  accumulate(v, static_cast<const Tensor<Scalar>&>(g));
}

template <typename Scalar>
void Graph<Scalar>::backward(Var<Scalar> root) {
  if (root.value().size() != 1) {
    throw ShapeError("backward() needs a one-element root, got " + shape_string(root.shape()));
  }
  if (!root.requires_grad()) return;
  nodes_[static_cast<std::size_t>(root.id())].grad = Tensor<Scalar>::full(root.shape(), Scalar(1));
  for (int i = root.id(); i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (n.param) {
      require_finite(n.grad, std::string("gradient of ") + n.param->name);
      n.param->grad.data() += n.grad.data();
    } else if (n.backward) {
      n.backward(*this, n.grad);
    }
    n.grad = Tensor<Scalar>();
  }
}

namespace {

using detail::broadcast_shapes;

/// Walks a right-aligned broadcast of shapes `a` and `b` to `out` as runs of
/// contiguous output elements. Axes with the same broadcast pattern are
/// merged first, so typical cases reduce to one or two loops. For every run
/// `fn(out_offset, a_offset, b_offset, length, a_step, b_step)` is called;
/// a step of 0 means that operand is constant over the run.
template <typename Fn>
void for_each_run(const Shape& out, const Shape& a, const Shape& b, Fn&& fn) {
  const std::size_t r = out.size();
  auto padded = [r](const Shape& s) {
    Shape p(r, 1);
    std::copy(s.begin(), s.end(), p.begin() + static_cast<std::ptrdiff_t>(r - s.size()));
    return p;
  };
  const Shape pa = padded(a), pb = padded(b);
  struct Axis {
    Index extent;
    bool a_full, b_full;
  };
  std::vector<Axis> axes;
  for (std::size_t i = 0; i < r; ++i) {
    if (out[i] == 1) continue;
    const Axis ax{out[i], pa[i] != 1, pb[i] != 1};
    if (!axes.empty() && axes.back().a_full == ax.a_full && axes.back().b_full == ax.b_full) {
      axes.back().extent *= ax.extent;
    } else {
      axes.push_back(ax);
    }
  }
  if (axes.empty()) {
    fn(Index{0}, Index{0}, Index{0}, Index{1}, Index{0}, Index{0});
    return;
  }
  const std::size_t n = axes.size();
  std::vector<Index> sa(n), sb(n);
  Index ta = 1, tb = 1;
  for (std::size_t i = n; i-- > 0;) {
    sa[i] = axes[i].a_full ? ta : 0;
    sb[i] = axes[i].b_full ? tb : 0;
    if (axes[i].a_full) ta *= axes[i].extent;
    if (axes[i].b_full) tb *= axes[i].extent;
  }
  const Index inner = axes.back().extent;
  const Index step_a = sa.back(), step_b = sb.back();
  Index outer = 1;
  for (std::size_t i = 0; i + 1 < n; ++i) outer *= axes[i].extent;
  std::vector<Index> counter(n, 0);
  Index oa = 0, ob = 0;
  for (Index o = 0; o < outer; ++o) {
    fn(o * inner, oa, ob, inner, step_a, step_b);
    for (std::size_t ax = n - 1; ax-- > 0;) {
      if (++counter[ax] < axes[ax].extent) {
        oa += sa[ax];
        ob += sb[ax];
        break;
      }
      oa -= sa[ax] * (axes[ax].extent - 1);
      ob -= sb[ax] * (axes[ax].extent - 1);
      counter[ax] = 0;
    }
  }
}

template <typename Scalar>
using ArrayMap = Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>>;
template <typename Scalar>
using ConstArrayMap = Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>;

/// Sums `g` (shaped like the broadcast output) back onto an operand of
/// shape `in`. For a product, `other_value` is the other factor.
template <typename Scalar>
Tensor<Scalar> reduce_broadcast(const Tensor<Scalar>& g, const Shape& in, const Shape& other,
                                bool in_is_a, const Tensor<Scalar>* other_value) {
  Tensor<Scalar> r(in);
  const Shape& sa = in_is_a ? in : other;
  const Shape& sb = in_is_a ? other : in;
  for_each_run(g.shape(), sa, sb, [&](Index oo, Index ao, Index bo, Index n, Index as, Index bs) {
    const Index io = in_is_a ? ao : bo;
    const Index is = in_is_a ? as : bs;
    const Index xo = in_is_a ? bo : ao;
    const Index xs = in_is_a ? bs : as;
    ConstArrayMap<Scalar> gs(g.ptr() + oo, n);
    if (other_value) {
      // d(a*b)/da = b, expanded along the run.
      if (xs == 0) {
        const Scalar bval = other_value->ptr()[xo];
        if (is == 0) {
          r.ptr()[io] += (gs * bval).sum();
        } else {
          ArrayMap<Scalar>(r.ptr() + io, n) += gs * bval;
        }
      } else {
        ConstArrayMap<Scalar> bv(other_value->ptr() + xo, n);
        if (is == 0) {
          r.ptr()[io] += (gs * bv).sum();
        } else {
          ArrayMap<Scalar>(r.ptr() + io, n) += gs * bv;
        }
      }
    } else if (is == 0) {
      r.ptr()[io] += gs.sum();
    } else {
      ArrayMap<Scalar>(r.ptr() + io, n) += gs;
    }
  });
  return r;
}

/// Shared machinery of add/sub/mul.
template <typename Scalar, typename Combine>
Var<Scalar> binary(const char* op, Var<Scalar> a, Var<Scalar> b, Combine combine,
                   int kind /* 0 add, 1 sub, 2 mul */) {
  auto& g = a.graph();
  const Tensor<Scalar>& av = a.value();
  const Tensor<Scalar>& bv = b.value();
  if (av.shape() == bv.shape()) {
    Tensor<Scalar> out(av.shape(), combine(av.data(), bv.data()));
    return g.record(op, std::move(out), {a, b}, [a, b, kind](Graph<Scalar>& gr, const Tensor<Scalar>& go) {
      if (kind == 2) {
        if (a.requires_grad()) gr.accumulate(a, Tensor<Scalar>(go.shape(), go.data() * b.value().data()));
        if (b.requires_grad()) gr.accumulate(b, Tensor<Scalar>(go.shape(), go.data() * a.value().data()));
        return;
      }
      gr.accumulate(a, go);
      if (b.requires_grad()) {
        gr.accumulate(b, kind == 1 ? Tensor<Scalar>(go.shape(), -go.data()) : go);
      }
    });
  }
  const Shape out_shape = broadcast_shapes(av.shape(), bv.shape(), op);
  Tensor<Scalar> out(out_shape);
  for_each_run(out_shape, av.shape(), bv.shape(), [&](Index oo, Index ao, Index bo, Index n, Index as, Index bs) {
    ArrayMap<Scalar> o(out.ptr() + oo, n);
    if (as != 0 && bs != 0) {
      o = combine(ConstArrayMap<Scalar>(av.ptr() + ao, n), ConstArrayMap<Scalar>(bv.ptr() + bo, n));
    } else if (as == 0 && bs != 0) {
      o = combine(Eigen::Array<Scalar, Eigen::Dynamic, 1>::Constant(n, av.ptr()[ao]),
                  ConstArrayMap<Scalar>(bv.ptr() + bo, n));
    } else if (as != 0) {
      o = combine(ConstArrayMap<Scalar>(av.ptr() + ao, n),
                  Eigen::Array<Scalar, Eigen::Dynamic, 1>::Constant(n, bv.ptr()[bo]));
    } else {
      o.setConstant(combine(Eigen::Array<Scalar, 1, 1>::Constant(av.ptr()[ao]),
                            Eigen::Array<Scalar, 1, 1>::Constant(bv.ptr()[bo]))(0));
    }
  });
  return g.record(op, std::move(out), {a, b}, [a, b, kind](Graph<Scalar>& gr, const Tensor<Scalar>& go) {
    if (a.requires_grad()) {
      gr.accumulate(a, reduce_broadcast(go, a.shape(), b.shape(), true,
                                        kind == 2 ? &b.value() : nullptr));
    }
    if (b.requires_grad()) {
      Tensor<Scalar> gb = reduce_broadcast(go, b.shape(), a.shape(), false,
                                           kind == 2 ? &a.value() : nullptr);
      if (kind == 1) gb.data() = -gb.data();
      gr.accumulate(b, std::move(gb));
    }
  });
}

template <typename Scalar>
Var<Scalar> unary(const char* op, Var<Scalar> x, Tensor<Scalar> out,
                  std::function<Tensor<Scalar>(const Tensor<Scalar>& x, const Tensor<Scalar>& go)> deriv) {
  return x.graph().record(op, std::move(out), {x},
                          [x, deriv](Graph<Scalar>& gr, const Tensor<Scalar>& go) {
                            gr.accumulate(x, deriv(x.value(), go));
                          });
}

}  // namespace

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  return binary<S>("add", a, b, [](const auto& x, const auto& y) { return (x + y).eval(); }, 0);
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
  return binary<S>("sub", a, b, [](const auto& x, const auto& y) { return (x - y).eval(); }, 1);
}

template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
  return binary<S>("mul", a, b, [](const auto& x, const auto& y) { return (x * y).eval(); }, 2);
}

template <typename S>
Var<S> scale(Var<S> a, double s) {
  const S f = static_cast<S>(s);
  return unary<S>("scale", a, Tensor<S>(a.shape(), a.value().data() * f),
                  [f](const Tensor<S>&, const Tensor<S>& go) {
                    return Tensor<S>(go.shape(), go.data() * f);
                  });
}

template <typename S>
Var<S> add_scalar(Var<S> a, double s) {
  return unary<S>("add_scalar", a, Tensor<S>(a.shape(), a.value().data() + static_cast<S>(s)),
                  [](const Tensor<S>&, const Tensor<S>& go) { return go; });
}

template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
  return a.graph().record("matmul", matmul(a.value(), b.value()), {a, b},
                          [a, b](Graph<S>& gr, const Tensor<S>& go) {
                            Tensor<S> ga, gb;
                            detail::matmul_backward(a.value(), b.value(), go,
                                                    a.requires_grad() ? &ga : nullptr,
                                                    b.requires_grad() ? &gb : nullptr);
                            if (a.requires_grad()) gr.accumulate(a, ga);
                            if (b.requires_grad()) gr.accumulate(b, gb);
                          });
}

namespace {

template <typename S>
Var<S> linear_impl(Var<S> x, Var<S> w, const Var<S>* bias) {
  const Tensor<S>& xv = x.value();
  const Tensor<S>& wv = w.value();
  if (wv.rank() != 2 || xv.dim(-1) != wv.dim(1)) {
    throw ShapeError("linear: input " + shape_string(xv.shape()) + " incompatible with weight " +
                     shape_string(wv.shape()));
  }
  const Index out_f = wv.dim(0);
  Tensor<S> out = project_rows(xv, wv);
  auto om = out.rows_view();
  if (bias) {
    if (bias->value().size() != out_f) {
      throw ShapeError("linear: bias " + shape_string(bias->shape()) + " does not match " +
                       std::to_string(out_f) + " outputs");
    }
    om.rowwise() += bias->value().data().matrix().transpose();
  }
  Var<S> b = bias ? *bias : Var<S>();
  std::vector<Var<S>> inputs{x, w};
  if (bias) inputs.push_back(*bias);
  return x.graph().record(bias ? "linear" : "linear_nobias", std::move(out), inputs,
                          [x, w, b](Graph<S>& gr, const Tensor<S>& go) {
                            const auto gm = go.rows_view();
                            if (x.requires_grad()) {
                              Tensor<S> gx(x.shape());
                              gx.rows_view().noalias() = gm * w.value().rows_view();
                              gr.accumulate(x, gx);
                            }
                            if (w.requires_grad()) {
                              Tensor<S> gw(w.shape());
                              gw.rows_view().noalias() = gm.transpose() * x.value().rows_view();
                              gr.accumulate(w, gw);
                            }
                            if (b.valid() && b.requires_grad()) {
                              Tensor<S> gb(b.shape());
                              gb.data() = gm.colwise().sum().transpose().array();
                              gr.accumulate(b, gb);
                            }
                          });
}

}  // namespace

template <typename S>
Var<S> linear(Var<S> x, Var<S> weight) {
  return linear_impl<S>(x, weight, nullptr);
}

template <typename S>
Var<S> linear(Var<S> x, Var<S> weight, Var<S> bias) {
  return linear_impl<S>(x, weight, &bias);
}

template <typename S>
Var<S> softmax_lastdim(Var<S> x) {
  Tensor<S> y = softmax_lastdim(x.value());
  return x.graph().record("softmax_lastdim", y, {x}, [x, y](Graph<S>& gr, const Tensor<S>& go) {
    Tensor<S> gx(go.shape());
    const auto ym = y.rows_view();
    const auto gm = go.rows_view();
    const auto dots = (ym.array() * gm.array()).rowwise().sum().eval();
    gx.rows_view() = (ym.array() * (gm.array().colwise() - dots)).matrix();
    gr.accumulate(x, gx);
  });
}

template <typename S>
Var<S> scaled_dot_attention(Var<S> q, Var<S> k, Var<S> v) {
  auto& g = q.graph();
  const bool need = g.grad_enabled() && (q.requires_grad() || k.requires_grad() || v.requires_grad());
  auto probs = std::make_shared<Tensor<S>>();
  Tensor<S> out = scaled_dot_attention(q.value(), k.value(), v.value(), need ? probs.get() : nullptr);
  return g.record("scaled_dot_attention", std::move(out), {q, k, v},
                  [q, k, v, probs](Graph<S>& gr, const Tensor<S>& go) {
                    Tensor<S> gq, gk, gv;
                    detail::attention_backward(q.value(), k.value(), v.value(), *probs, go,
                                               q.requires_grad() ? &gq : nullptr,
                                               k.requires_grad() ? &gk : nullptr,
                                               v.requires_grad() ? &gv : nullptr);
                    if (q.requires_grad()) gr.accumulate(q, gq);
                    if (k.requires_grad()) gr.accumulate(k, gk);
                    if (v.requires_grad()) gr.accumulate(v, gv);
                  });
}

template <typename S>
Var<S> rope_rotate(Var<S> x, const Tensor<S>& angles) {
  auto a = std::make_shared<const Tensor<S>>(angles);
  return x.graph().record("rope_rotate", rope_rotate(x.value(), angles), {x},
                          [x, a](Graph<S>& gr, const Tensor<S>& go) {
                            gr.accumulate(x, rope_rotate(go, *a, -1));
                          });
}

template <typename S>
Var<S> rms_norm(Var<S> x, Var<S> gain, double eps) {
  return x.graph().record("rms_norm", rms_norm(x.value(), gain.value(), eps), {x, gain},
                          [x, gain, eps](Graph<S>& gr, const Tensor<S>& go) {
                            Tensor<S> gx, gg;
                            detail::rms_norm_backward(x.value(), gain.value(), go, eps,
                                                      x.requires_grad() ? &gx : nullptr,
                                                      gain.requires_grad() ? &gg : nullptr);
                            if (x.requires_grad()) gr.accumulate(x, gx);
                            if (gain.requires_grad()) gr.accumulate(gain, gg);
                          });
}

template <typename S>
Var<S> silu(Var<S> x) {
  const auto& xd = x.value().data();
  Tensor<S> out(x.shape(), xd / (S(1) + (-xd).exp()));
  return unary<S>("silu", x, std::move(out), [](const Tensor<S>& xv, const Tensor<S>& go) {
    const auto sig = (S(1) / (S(1) + (-xv.data()).exp())).eval();
    return Tensor<S>(go.shape(), go.data() * sig * (S(1) + xv.data() * (S(1) - sig)));
  });
}

template <typename S>
Var<S> gelu(Var<S> x) {
  const S c = static_cast<S>(std::sqrt(2.0 / std::numbers::pi));
  const S k = static_cast<S>(0.044715);
  const auto& xd = x.value().data();
  const auto th = (c * (xd + k * xd.cube())).tanh().eval();
  Tensor<S> out(x.shape(), S(0.5) * xd * (S(1) + th));
  return unary<S>("gelu", x, std::move(out), [c, k](const Tensor<S>& xv, const Tensor<S>& go) {
    const auto& v = xv.data();
    const auto t = (c * (v + k * v.cube())).tanh().eval();
    const auto d = (S(0.5) * (S(1) + t) +
                    S(0.5) * v * (S(1) - t.square()) * c * (S(1) + S(3) * k * v.square()))
                       .eval();
    return Tensor<S>(go.shape(), go.data() * d);
  });
}

template <typename S>
Var<S> abs(Var<S> x) {
  return unary<S>("abs", x, Tensor<S>(x.shape(), x.value().data().abs()),
                  [](const Tensor<S>& xv, const Tensor<S>& go) {
                    return Tensor<S>(go.shape(), go.data() * xv.data().sign());
                  });
}

template <typename S>
Var<S> reshape(Var<S> x, Shape shape) {
  const Shape orig = x.shape();
  return x.graph().record("reshape", x.value().reshaped(std::move(shape)), {x},
                          [x, orig](Graph<S>& gr, const Tensor<S>& go) {
                            gr.accumulate(x, go.reshaped(orig));
                          });
}

template <typename S>
Tensor<S> permute_tensor(const Tensor<S>& x, const std::vector<int>& axes) {
  const int r = x.rank();
  if (static_cast<int>(axes.size()) != r) {
    throw ShapeError("permute: " + std::to_string(axes.size()) + " axes for shape " +
                     shape_string(x.shape()));
  }
  std::vector<Index> in_stride(static_cast<std::size_t>(r));
  Index s = 1;
  for (int i = r - 1; i >= 0; --i) {
    in_stride[static_cast<std::size_t>(i)] = s;
    s *= x.shape()[static_cast<std::size_t>(i)];
  }
  Shape out_shape(static_cast<std::size_t>(r));
  std::vector<Index> stride(static_cast<std::size_t>(r));
  std::vector<bool> seen(static_cast<std::size_t>(r), false);
  for (int i = 0; i < r; ++i) {
    const int a = axes[static_cast<std::size_t>(i)];
    if (a < 0 || a >= r || seen[static_cast<std::size_t>(a)]) {
      throw ShapeError("permute: invalid axis list for shape " + shape_string(x.shape()));
    }
    seen[static_cast<std::size_t>(a)] = true;
    out_shape[static_cast<std::size_t>(i)] = x.shape()[static_cast<std::size_t>(a)];
    stride[static_cast<std::size_t>(i)] = in_stride[static_cast<std::size_t>(a)];
  }
  Tensor<S> out(out_shape);
  // Innermost output axis copied in a tight loop.
  const Index inner = out_shape.back();
  const Index inner_stride = stride.back();
  const Index outer = out.size() / inner;
  std::vector<Index> counter(static_cast<std::size_t>(r), 0);
  Index src = 0;
  S* o = out.ptr();
  const S* in = x.ptr();
  for (Index oi = 0; oi < outer; ++oi) {
    for (Index j = 0; j < inner; ++j) o[oi * inner + j] = in[src + j * inner_stride];
    for (int ax = r - 2; ax >= 0; --ax) {
      const auto a = static_cast<std::size_t>(ax);
      if (++counter[a] < out_shape[a]) {
        src += stride[a];
        break;
      }
      src -= stride[a] * (out_shape[a] - 1);
      counter[a] = 0;
    }
  }
  return out;
}

template <typename S>
Var<S> permute(Var<S> x, std::vector<int> axes) {
  std::vector<int> inverse(axes.size());
  for (std::size_t i = 0; i < axes.size(); ++i) {
    if (axes[i] >= 0 && static_cast<std::size_t>(axes[i]) < axes.size()) {
      inverse[static_cast<std::size_t>(axes[i])] = static_cast<int>(i);
    }
  }
  return x.graph().record("permute", permute_tensor(x.value(), axes), {x},
                          [x, inverse](Graph<S>& gr, const Tensor<S>& go) {
                            gr.accumulate(x, permute_tensor(go, inverse));
                          });
}

namespace {

/// (outer, axis extent, inner) factorization around `axis`.
struct AxisSplit {
  Index outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, int axis) {
  AxisSplit r;
  for (int i = 0; i < axis; ++i) r.outer *= s[static_cast<std::size_t>(i)];
  r.extent = s[static_cast<std::size_t>(axis)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

int normalize_axis(int axis, int rank, const char* op) {
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return a;
}

}  // namespace

template <typename S>
Var<S> concat(std::span<const Var<S>> parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts[0].shape();
  const int ax = normalize_axis(axis, static_cast<int>(first.size()), "concat");
  Shape out_shape = first;
  out_shape[static_cast<std::size_t>(ax)] = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != first.size()) throw ShapeError("concat: rank mismatch");
    out_shape[static_cast<std::size_t>(ax)] += s[static_cast<std::size_t>(ax)];
    s[static_cast<std::size_t>(ax)] = first[static_cast<std::size_t>(ax)];
    if (s != first) {
      throw ShapeError("concat: shapes " + shape_string(first) + " and " +
                       shape_string(p.shape()) + " differ off the concat axis");
    }
  }
  Tensor<S> out(out_shape);
  const AxisSplit os = split_at(out_shape, ax);
  Index offset = 0;
  std::vector<Index> offsets;
  for (const auto& p : parts) {
    const AxisSplit ps = split_at(p.shape(), ax);
    offsets.push_back(offset);
    for (Index o = 0; o < os.outer; ++o) {
      std::copy_n(p.value().ptr() + o * ps.extent * ps.inner, ps.extent * ps.inner,
                  out.ptr() + (o * os.extent + offset) * os.inner);
    }
    offset += ps.extent;
  }
  std::vector<Var<S>> inputs(parts.begin(), parts.end());
  return parts[0].graph().record(
      "concat", std::move(out), inputs, [inputs, offsets, ax, os](Graph<S>& gr, const Tensor<S>& go) {
        for (std::size_t i = 0; i < inputs.size(); ++i) {
          if (!inputs[i].requires_grad()) continue;
          const AxisSplit ps = split_at(inputs[i].shape(), ax);
          Tensor<S> g(inputs[i].shape());
          for (Index o = 0; o < os.outer; ++o) {
            std::copy_n(go.ptr() + (o * os.extent + offsets[i]) * os.inner, ps.extent * ps.inner,
                        g.ptr() + o * ps.extent * ps.inner);
          }
          gr.accumulate(inputs[i], g);
        }
      });
}

template <typename S>
Var<S> slice(Var<S> x, int axis, Index start, Index length) {
  const Shape& in_shape = x.shape();
  const int ax = normalize_axis(axis, static_cast<int>(in_shape.size()), "slice");
  const AxisSplit is = split_at(in_shape, ax);
  if (start < 0 || length < 1 || start + length > is.extent) {
    throw ShapeError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of range for axis " + std::to_string(axis) + " of " +
                     shape_string(in_shape));
  }
  Shape out_shape = in_shape;
  out_shape[static_cast<std::size_t>(ax)] = length;
  Tensor<S> out(out_shape);
  for (Index o = 0; o < is.outer; ++o) {
    std::copy_n(x.value().ptr() + (o * is.extent + start) * is.inner, length * is.inner,
                out.ptr() + o * length * is.inner);
  }
  return x.graph().record("slice", std::move(out), {x},
                          [x, is, start, length](Graph<S>& gr, const Tensor<S>& go) {
                            Tensor<S> g(x.shape());
                            for (Index o = 0; o < is.outer; ++o) {
                              std::copy_n(go.ptr() + o * length * is.inner, length * is.inner,
                                          g.ptr() + (o * is.extent + start) * is.inner);
                            }
                            gr.accumulate(x, g);
                          });
}

template <typename S>
Var<S> sum(Var<S> x) {
  return x.graph().record("sum", Tensor<S>::scalar(x.value().data().sum()), {x},
                          [x](Graph<S>& gr, const Tensor<S>& go) {
                            gr.accumulate(x, Tensor<S>::full(x.shape(), go[0]));
                          });
}

template <typename S>
Var<S> mean(Var<S> x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.value().size()));
}

template <typename S>
Var<S> mse(Var<S> a, Var<S> b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mse: shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
  const auto diff = (a.value().data() - b.value().data()).eval();
  const S n = static_cast<S>(diff.size());
  return a.graph().record("mse", Tensor<S>::scalar(diff.square().sum() / n), {a, b},
                          [a, b, n](Graph<S>& gr, const Tensor<S>& go) {
                            const auto d = (a.value().data() - b.value().data()).eval();
                            Tensor<S> g(a.shape(), d * (S(2) * go[0] / n));
                            if (a.requires_grad()) gr.accumulate(a, g);
                            if (b.requires_grad()) gr.accumulate(b, Tensor<S>(g.shape(), -g.data()));
                          });
}

#define VIFEEDIT_INSTANTIATE(S)                                            \
  template class Graph<S>;                                                 \
  template Var<S> add(Var<S>, Var<S>);                                     \
  template Var<S> sub(Var<S>, Var<S>);                                     \
  template Var<S> mul(Var<S>, Var<S>);                                     \
  template Var<S> scale(Var<S>, double);                                   \
  template Var<S> add_scalar(Var<S>, double);                              \
  template Var<S> matmul(Var<S>, Var<S>);                                  \
  template Var<S> linear(Var<S>, Var<S>);                                  \
  template Var<S> linear(Var<S>, Var<S>, Var<S>);                          \
  template Var<S> softmax_lastdim(Var<S>);                                 \
  template Var<S> scaled_dot_attention(Var<S>, Var<S>, Var<S>);            \
  template Var<S> rope_rotate(Var<S>, const Tensor<S>&);                   \
  template Var<S> rms_norm(Var<S>, Var<S>, double);                        \
  template Var<S> silu(Var<S>);                                            \
  template Var<S> gelu(Var<S>);                                            \
  template Var<S> abs(Var<S>);                                             \
  template Var<S> reshape(Var<S>, Shape);                                  \
  template Var<S> permute(Var<S>, std::vector<int>);                       \
  template Tensor<S> permute_tensor(const Tensor<S>&, const std::vector<int>&); \
  template Var<S> concat(std::span<const Var<S>>, int);                    \
  template Var<S> slice(Var<S>, int, Index, Index);                        \
  template Var<S> sum(Var<S>);                                             \
  template Var<S> mean(Var<S>);                                            \
  template Var<S> mse(Var<S>, Var<S>);

VIFEEDIT_INSTANTIATE(float)
VIFEEDIT_INSTANTIATE(double)

#undef VIFEEDIT_INSTANTIATE

}  // namespace vifeedit
