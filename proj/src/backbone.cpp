#include "vifeedit/backbone.hpp"

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

namespace vifeedit {

void ModelConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw std::invalid_argument("invalid model config: " + what);
  };
  require(blocks >= 1, "blocks must be >= 1");
  require(dim >= 2 && heads >= 1 && dim % heads == 0, "dim must be divisible by heads");
  require(time_dim >= 2 && time_dim % 2 == 0, "time_dim must be even");
  require(ffn_hidden >= 1, "ffn_hidden must be >= 1");
  require(patch >= 1 && channels >= 1, "patch and channels must be >= 1");
  require(num_tasks >= 1, "num_tasks must be >= 1");
  require(max_frames >= 1, "max_frames must be >= 1");
  (void)rope_axis_split(head_dim());
}

std::vector<PositionTriple> grid_positions(const GridGeometry& g) {
  std::vector<PositionTriple> out;
  out.reserve(static_cast<std::size_t>(g.tokens()));
  for (Index t = 0; t < g.frames; ++t) {
    for (Index h = 0; h < g.rows; ++h) {
      for (Index w = 0; w < g.cols; ++w) out.push_back({t, h, w});
    }
  }
  return out;
}

RopeAxisSplit rope_axis_split(int head_dim) {
  if (head_dim < 2 || head_dim % 2 != 0) {
    throw std::invalid_argument("rotary head width must be even, got " + std::to_string(head_dim));
  }
  const int third = (head_dim + 2) / 3;  // ceil(head_dim / 3)
  const int even = third + (third % 2);
  RopeAxisSplit s{even, even, head_dim - 2 * even};
  if (s.w < 0) {
    throw std::invalid_argument("head width " + std::to_string(head_dim) +
                                " cannot be partitioned into t/h/w rotary groups");
  }
  return s;
}

template <typename Scalar>
Tensor<Scalar> rope3d_angles(std::span<const PositionTriple> positions, int head_dim, double theta) {
  const RopeAxisSplit split = rope_axis_split(head_dim);
  const Index half = head_dim / 2;
  Tensor<Scalar> angles({static_cast<Index>(positions.size()), half});
  auto fill = [&](Index token, Index offset, int channels, Index pos) {
    for (int i = 0; i < channels / 2; ++i) {
      const double inv_freq = std::pow(theta, -2.0 * i / channels);
      angles[token * half + offset + i] = static_cast<Scalar>(static_cast<double>(pos) * inv_freq);
    }
  };
  for (std::size_t n = 0; n < positions.size(); ++n) {
    const auto& p = positions[n];
    const auto tok = static_cast<Index>(n);
    fill(tok, 0, split.t, p.t);
    fill(tok, split.t / 2, split.h, p.h);
    fill(tok, (split.t + split.h) / 2, split.w, p.w);
  }
  return angles;
}

template <typename Scalar>
Tensor<Scalar> to_patches(const Tensor<Scalar>& video, int patch) {
  if (video.rank() != 5) {
    throw ShapeError("to_patches expects [B, f, H, W, C], got " + shape_string(video.shape()));
  }
  const Index b = video.dim(0), f = video.dim(1), H = video.dim(2), W = video.dim(3),
              c = video.dim(4);
  if (patch < 1 || H % patch != 0 || W % patch != 0) {
    throw ShapeError("frame " + std::to_string(H) + "x" + std::to_string(W) +
                     " is not divisible by patch " + std::to_string(patch));
  }
  const Index hh = H / patch, ww = W / patch, p = patch;
  Tensor<Scalar> out({b, f * hh * ww, p * p * c});
  Scalar* o = out.ptr();
  const Scalar* in = video.ptr();
  for (Index bi = 0; bi < b; ++bi) {
    for (Index t = 0; t < f; ++t) {
      for (Index y = 0; y < hh; ++y) {
        for (Index x = 0; x < ww; ++x) {
          for (Index py = 0; py < p; ++py) {
            const Scalar* row = in + ((((bi * f + t) * H) + y * p + py) * W + x * p) * c;
            o = std::copy_n(row, p * c, o);
          }
        }
      }
    }
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> from_patches(const Tensor<Scalar>& patches, const GridGeometry& g, int patch,
                            int channels) {
  const Index p = patch, c = channels;
  if (patches.rank() != 3 || patches.dim(1) != g.tokens() || patches.dim(2) != p * p * c) {
    throw ShapeError("from_patches: patches " + shape_string(patches.shape()) +
                     " do not match grid " + std::to_string(g.frames) + "x" +
                     std::to_string(g.rows) + "x" + std::to_string(g.cols) + " with patch " +
                     std::to_string(patch));
  }
  const Index b = patches.dim(0), H = g.rows * p, W = g.cols * p;
  Tensor<Scalar> video({b, g.frames, H, W, c});
  const Scalar* in = patches.ptr();
  Scalar* out = video.ptr();
  for (Index bi = 0; bi < b; ++bi) {
    for (Index t = 0; t < g.frames; ++t) {
      for (Index y = 0; y < g.rows; ++y) {
        for (Index x = 0; x < g.cols; ++x) {
          for (Index py = 0; py < p; ++py) {
            Scalar* row = out + ((((bi * g.frames + t) * H) + y * p + py) * W + x * p) * c;
            std::copy_n(in, p * c, row);
            in += p * c;
          }
        }
      }
    }
  }
  return video;
}

template <typename Scalar>
TokenGrid<Scalar> patchify(const Tensor<Scalar>& video, int patch, const Tensor<Scalar>& weight,
                           const Tensor<Scalar>* bias) {
  Tensor<Scalar> vectors = to_patches(video, patch);
  if (weight.rank() != 2 || weight.dim(1) != vectors.dim(2)) {
    throw ShapeError("patchify: projection " + shape_string(weight.shape()) +
                     " does not accept patch vectors of width " + std::to_string(vectors.dim(2)));
  }
  TokenGrid<Scalar> grid;
  grid.geometry = {video.dim(1), video.dim(2) / patch, video.dim(3) / patch};
  grid.positions = grid_positions(grid.geometry);
  grid.tokens = project_rows(vectors, weight);
  auto tm = grid.tokens.rows_view();
  if (bias) tm.rowwise() += bias->data().matrix().transpose();
  return grid;
}

template <typename Scalar>
Tensor<Scalar> unpatchify(const TokenGrid<Scalar>& grid, const Tensor<Scalar>& projection, int patch,
                          int channels) {
  if (projection.rank() != 2 || projection.dim(1) != grid.tokens.dim(2) ||
      projection.dim(0) != Index{patch} * patch * channels) {
    throw ShapeError("unpatchify: projection " + shape_string(projection.shape()) +
                     " does not map tokens " + shape_string(grid.tokens.shape()) +
                     " to patch vectors");
  }
  if (grid.tokens.dim(1) != grid.geometry.tokens()) {
    throw ShapeError("unpatchify: token count does not match grid geometry");
  }
  Tensor<Scalar> vectors = project_rows(grid.tokens, projection);
  return from_patches(vectors, grid.geometry, patch, channels);
}

namespace {

template <typename Scalar>
Param<Scalar> gaussian(const std::string& name, Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, stddev);
  Tensor<Scalar> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(nd(rng));
  return Param<Scalar>(name, std::move(t), false, ParamRole::base);
}

template <typename Scalar>
Param<Scalar> constant(const std::string& name, Shape shape, double value) {
  return Param<Scalar>(name, Tensor<Scalar>::full(std::move(shape), static_cast<Scalar>(value)), false,
                       ParamRole::base);
}

template <typename Scalar, typename Other>
void copy_params(const BackboneParams<Scalar>& from, BackboneParams<Other>& to) {
  auto& src = const_cast<BackboneParams<Scalar>&>(from);
  std::vector<Param<Scalar>*> a = src.params();
  std::vector<Param<Other>*> b = to.params();
  for (std::size_t i = 0; i < a.size(); ++i) *b[i] = a[i]->template cast<Other>();
}

}  // namespace

template <typename Scalar>
template <typename Other>
BackboneParams<Other> BackboneParams<Scalar>::cast() const {
  BackboneParams<Other> out;
  out.config = config;
  out.blocks.resize(blocks.size());
  copy_params(*this, out);
  return out;
}

template <typename Scalar>
BackboneParams<Scalar> init_backbone(const ModelConfig& config, std::uint64_t seed,
                                     const BackboneInit& init) {
  config.validate();
  std::mt19937_64 rng(seed);
  const Index d = config.dim, dt = config.time_dim, P = config.patch_dim(), hid = config.ffn_hidden;
  const double mod_std = init.modulation_std / std::sqrt(static_cast<double>(dt));
  BackboneParams<Scalar> p;
  p.config = config;
  p.patch_weight = gaussian<Scalar>("patch_embed.weight", {d, P}, 1.0 / std::sqrt(double(P)), rng);
  p.patch_bias = constant<Scalar>("patch_embed.bias", {d}, 0.0);
  p.time_weight1 = gaussian<Scalar>("time_embed.0.weight", {dt, dt}, 1.0 / std::sqrt(double(dt)), rng);
  p.time_bias1 = constant<Scalar>("time_embed.0.bias", {dt}, 0.0);
  p.time_weight2 = gaussian<Scalar>("time_embed.2.weight", {dt, dt}, 1.0 / std::sqrt(double(dt)), rng);
  p.time_bias2 = constant<Scalar>("time_embed.2.bias", {dt}, 0.0);
  p.prompt_table = gaussian<Scalar>("prompt_table", {config.num_tasks, dt}, 0.5, rng);
  for (int bi = 0; bi < config.blocks; ++bi) {
    const std::string pre = "blocks." + std::to_string(bi) + ".";
    BlockParams<Scalar> b;
    b.norm_attn = constant<Scalar>(pre + "norm1.weight", {d}, 1.0);
    b.norm_ffn = constant<Scalar>(pre + "norm2.weight", {d}, 1.0);
    const double s = 1.0 / std::sqrt(double(d));
    b.attn.q_weight = gaussian<Scalar>(pre + "attn.q.weight", {d, d}, s, rng);
    b.attn.q_bias = constant<Scalar>(pre + "attn.q.bias", {d}, 0.0);
    b.attn.k_weight = gaussian<Scalar>(pre + "attn.k.weight", {d, d}, s, rng);
    b.attn.k_bias = constant<Scalar>(pre + "attn.k.bias", {d}, 0.0);
    b.attn.v_weight = gaussian<Scalar>(pre + "attn.v.weight", {d, d}, s, rng);
    b.attn.v_bias = constant<Scalar>(pre + "attn.v.bias", {d}, 0.0);
    b.attn.o_weight = gaussian<Scalar>(pre + "attn.o.weight", {d, d}, s, rng);
    b.attn.o_bias = constant<Scalar>(pre + "attn.o.bias", {d}, 0.0);
    b.ffn0_weight = gaussian<Scalar>(pre + "ffn.0.weight", {hid, d}, s, rng);
    b.ffn0_bias = constant<Scalar>(pre + "ffn.0.bias", {hid}, 0.0);
    b.ffn2_weight = gaussian<Scalar>(pre + "ffn.2.weight", {d, hid}, 1.0 / std::sqrt(double(hid)), rng);
    b.ffn2_bias = constant<Scalar>(pre + "ffn.2.bias", {d}, 0.0);
    b.modulation_weight = gaussian<Scalar>(pre + "modulation.weight", {6 * d, dt}, mod_std, rng);
    Tensor<Scalar> mb({6 * d});
    for (Index i = 0; i < d; ++i) {
      mb[2 * d + i] = static_cast<Scalar>(init.gate_bias);
      mb[5 * d + i] = static_cast<Scalar>(init.gate_bias);
    }
    b.modulation_bias = Param<Scalar>(pre + "modulation.bias", std::move(mb), false, ParamRole::base);
    p.blocks.push_back(std::move(b));
  }
  p.final_norm = constant<Scalar>("head.norm.weight", {d}, 1.0);
  p.final_modulation_weight = gaussian<Scalar>("head.modulation.weight", {2 * d, dt}, mod_std, rng);
  p.final_modulation_bias = constant<Scalar>("head.modulation.bias", {2 * d}, 0.0);
  p.head_weight = gaussian<Scalar>("head.weight", {P, d}, 1.0 / std::sqrt(double(d)), rng);
  p.head_bias = constant<Scalar>("head.bias", {P}, 0.0);
  return p;
}

template <typename Scalar>
Tensor<Scalar> timestep_features(double t, int dim) {
  const int half = dim / 2;
  Tensor<Scalar> f({1, dim});
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / half);
    const double arg = 1000.0 * t * freq;
    f[i] = static_cast<Scalar>(std::cos(arg));
    f[half + i] = static_cast<Scalar>(std::sin(arg));
  }
  return f;
}

template <typename Scalar>
Var<Scalar> timestep_embed(Graph<Scalar>& g, BackboneParams<Scalar>& p, double t) {
  if (!(t >= 0.0 && t <= 1.0)) {
    throw std::invalid_argument("timestep " + std::to_string(t) + " outside [0, 1]");
  }
  auto x = g.constant(timestep_features<Scalar>(t, p.config.time_dim));
  x = silu(linear(x, g.param(p.time_weight1), g.param(p.time_bias1)));
  return linear(x, g.param(p.time_weight2), g.param(p.time_bias2));
}

template <typename Scalar>
Tensor<Scalar> timestep_embed(BackboneParams<Scalar>& p, double t) {
  Graph<Scalar> g(false);
  return timestep_embed(g, p, t).value().reshaped({p.config.time_dim});
}

template <typename Scalar>
Var<Scalar> conditioning(Graph<Scalar>& g, BackboneParams<Scalar>& p, std::span<const double> t,
                         std::span<const int> task_ids, std::vector<Var<Scalar>>* time_embeddings) {
  if (t.size() != task_ids.size() || t.empty()) {
    throw std::invalid_argument("conditioning: need one timestep and task id per sample");
  }
  auto table = g.param(p.prompt_table);
  std::vector<Var<Scalar>> rows;
  std::vector<std::pair<double, Var<Scalar>>> cache;
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (task_ids[i] < 0 || task_ids[i] >= p.config.num_tasks) {
      throw std::out_of_range("task id " + std::to_string(task_ids[i]) + " outside prompt table of " +
                              std::to_string(p.config.num_tasks));
    }
    Var<Scalar> emb;
    for (auto& [ct, v] : cache) {
      if (ct == t[i]) emb = v;
    }
    if (!emb.valid()) {
      emb = timestep_embed(g, p, t[i]);
      cache.emplace_back(t[i], emb);
    }
    if (time_embeddings) time_embeddings->push_back(emb);
    rows.push_back(emb + slice(table, 0, task_ids[i], 1));
  }
  return rows.size() == 1 ? rows[0] : concat(std::span<const Var<Scalar>>(rows), 0);
}

template <typename Scalar>
Modulation<Scalar> block_modulation(Var<Scalar> cond_act, BlockParams<Scalar>& block, int dim) {
  auto& g = cond_act.graph();
  const Index b = cond_act.dim(0);
  auto m = reshape(linear(cond_act, g.param(block.modulation_weight), g.param(block.modulation_bias)),
                   {b, 1, 6 * Index{dim}});
  auto part = [&](int i) { return slice(m, 2, Index{i} * dim, dim); };
  return {part(0), part(1), part(2), part(3), part(4), part(5)};
}

template <typename Scalar>
Var<Scalar> modulated_norm(Var<Scalar> x, Param<Scalar>& gain, Var<Scalar> shift, Var<Scalar> scale) {
  auto& g = x.graph();
  return rms_norm(x, g.param(gain)) * add_scalar(scale, 1.0) + shift;
}

template <typename Scalar>
Var<Scalar> split_heads(Var<Scalar> x, int heads) {
  const Index b = x.dim(0), s = x.dim(1), d = x.dim(2), dh = d / heads;
  return reshape(permute(reshape(x, {b, s, heads, dh}), {0, 2, 1, 3}), {b * heads, s, dh});
}

template <typename Scalar>
Var<Scalar> merge_heads(Var<Scalar> x, int heads) {
  const Index bh = x.dim(0), s = x.dim(1), dh = x.dim(2), b = bh / heads;
  return reshape(permute(reshape(x, {b, heads, s, dh}), {0, 2, 1, 3}), {b, s, heads * dh});
}

template <typename Scalar>
Var<Scalar> rotary_attention(Var<Scalar> q, Var<Scalar> k, Var<Scalar> v, const Tensor<Scalar>& angles,
                             int heads) {
  auto qh = rope_rotate(split_heads(q, heads), angles);
  auto kh = rope_rotate(split_heads(k, heads), angles);
  return merge_heads(scaled_dot_attention(qh, kh, split_heads(v, heads)), heads);
}

template <typename Scalar>
Var<Scalar> attention_3d(Var<Scalar> h, const Tensor<Scalar>& angles, AttentionParams<Scalar>& a,
                         int heads) {
  auto& g = h.graph();
  auto q = linear(h, g.param(a.q_weight), g.param(a.q_bias));
  auto k = linear(h, g.param(a.k_weight), g.param(a.k_bias));
  auto v = linear(h, g.param(a.v_weight), g.param(a.v_bias));
  return linear(rotary_attention(q, k, v, angles, heads), g.param(a.o_weight), g.param(a.o_bias));
}

template <typename Scalar>
Var<Scalar> feed_forward(Var<Scalar> h, BlockParams<Scalar>& block, LoraDelta<Scalar>* ffn0,
                         LoraDelta<Scalar>* ffn2) {
  auto& g = h.graph();
  auto hidden = linear(h, g.param(block.ffn0_weight), g.param(block.ffn0_bias));
  if (ffn0) hidden = hidden + ffn0->apply(h);
  hidden = gelu(hidden);
  auto out = linear(hidden, g.param(block.ffn2_weight), g.param(block.ffn2_bias));
  if (ffn2) out = out + ffn2->apply(hidden);
  return out;
}

template <typename Scalar>
Var<Scalar> block_forward(Var<Scalar> x, const Tensor<Scalar>& angles, Var<Scalar> cond_act,
                          BlockParams<Scalar>& block, const ModelConfig& config) {
  if (angles.dim(0) != x.dim(1)) {
    throw ShapeError("block_forward: " + std::to_string(angles.dim(0)) + " positions for " +
                     std::to_string(x.dim(1)) + " tokens");
  }
  const auto m = block_modulation(cond_act, block, config.dim);
  auto h = modulated_norm(x, block.norm_attn, m.shift_attn, m.scale_attn);
  x = x + m.gate_attn * attention_3d(h, angles, block.attn, config.heads);
  h = modulated_norm(x, block.norm_ffn, m.shift_ffn, m.scale_ffn);
  return x + m.gate_ffn * feed_forward(h, block);
}

template <typename Scalar>
Var<Scalar> velocity_head(Var<Scalar> x, Var<Scalar> cond_act, BackboneParams<Scalar>& p) {
  auto& g = x.graph();
  const Index b = cond_act.dim(0), d = p.config.dim;
  auto m = reshape(linear(cond_act, g.param(p.final_modulation_weight),
                          g.param(p.final_modulation_bias)),
                   {b, 1, 2 * d});
  auto h = modulated_norm(x, p.final_norm, slice(m, 2, 0, d), slice(m, 2, d, d));
  return linear(h, g.param(p.head_weight), g.param(p.head_bias));
}

template <typename Scalar>
Var<Scalar> forward_velocity(Graph<Scalar>& g, BackboneParams<Scalar>& p, const Tensor<Scalar>& patches,
                             const GridGeometry& geometry, std::span<const int> task_ids,
                             std::span<const double> t) {
  const auto& cfg = p.config;
  if (patches.rank() != 3 || patches.dim(1) != geometry.tokens() ||
      patches.dim(2) != cfg.patch_dim()) {
    throw ShapeError("forward_velocity: patches " + shape_string(patches.shape()) +
                     " inconsistent with the grid and patch width " +
                     std::to_string(cfg.patch_dim()));
  }
  if (static_cast<Index>(t.size()) != patches.dim(0)) {
    throw std::invalid_argument("forward_velocity: one timestep per batch element required");
  }
  auto x = linear(g.constant(patches), g.param(p.patch_weight), g.param(p.patch_bias));
  auto act = silu(conditioning(g, p, t, task_ids));
  const auto positions = grid_positions(geometry);
  const Tensor<Scalar> angles = rope3d_angles<Scalar>(positions, cfg.head_dim(), cfg.rope_theta);
  for (auto& block : p.blocks) x = block_forward(x, angles, act, block, cfg);
  return velocity_head(x, act, p);
}

#define VIFEEDIT_INSTANTIATE(S)                                                                     \
  template Tensor<S> rope3d_angles(std::span<const PositionTriple>, int, double);                   \
  template Tensor<S> to_patches(const Tensor<S>&, int);                                             \
  template Tensor<S> from_patches(const Tensor<S>&, const GridGeometry&, int, int);                 \
  template TokenGrid<S> patchify(const Tensor<S>&, int, const Tensor<S>&, const Tensor<S>*);        \
  template Tensor<S> unpatchify(const TokenGrid<S>&, const Tensor<S>&, int, int);                   \
  template BackboneParams<S> init_backbone(const ModelConfig&, std::uint64_t, const BackboneInit&); \
  template Tensor<S> timestep_features(double, int);                                                \
  template Var<S> timestep_embed(Graph<S>&, BackboneParams<S>&, double);                            \
  template Tensor<S> timestep_embed(BackboneParams<S>&, double);                                    \
  template Var<S> conditioning(Graph<S>&, BackboneParams<S>&, std::span<const double>,              \
                               std::span<const int>, std::vector<Var<S>>*);                         \
  template Modulation<S> block_modulation(Var<S>, BlockParams<S>&, int);                            \
  template Var<S> modulated_norm(Var<S>, Param<S>&, Var<S>, Var<S>);                                \
  template Var<S> split_heads(Var<S>, int);                                                         \
  template Var<S> merge_heads(Var<S>, int);                                                         \
  template Var<S> rotary_attention(Var<S>, Var<S>, Var<S>, const Tensor<S>&, int);                  \
  template Var<S> attention_3d(Var<S>, const Tensor<S>&, AttentionParams<S>&, int);                 \
  template Var<S> feed_forward(Var<S>, BlockParams<S>&, LoraDelta<S>*, LoraDelta<S>*);              \
  template Var<S> block_forward(Var<S>, const Tensor<S>&, Var<S>, BlockParams<S>&,                  \
                                const ModelConfig&);                                                \
  template Var<S> velocity_head(Var<S>, Var<S>, BackboneParams<S>&);                                \
  template Var<S> forward_velocity(Graph<S>&, BackboneParams<S>&, const Tensor<S>&,                 \
                                   const GridGeometry&, std::span<const int>,                       \
                                   std::span<const double>);

VIFEEDIT_INSTANTIATE(float)
VIFEEDIT_INSTANTIATE(double)
template BackboneParams<double> BackboneParams<float>::cast<double>() const;
template BackboneParams<float> BackboneParams<double>::cast<float>() const;
template BackboneParams<float> BackboneParams<float>::cast<float>() const;
template BackboneParams<double> BackboneParams<double>::cast<double>() const;

#undef VIFEEDIT_INSTANTIATE

}  // namespace vifeedit
