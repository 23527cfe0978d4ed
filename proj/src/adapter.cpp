#include "vifeedit/adapter.hpp"

#include <random>
#include <stdexcept>

namespace vifeedit {

namespace {

const char* const kProjections[4] = {"q", "k", "v", "o"};

template <typename Scalar>
Param<Scalar> frozen_copy(const Param<Scalar>& p, const std::string& name) {
  return Param<Scalar>(name, p.value, false, ParamRole::frozen_copy);
}

template <typename Scalar>
Var<Scalar> project(Var<Scalar> x, Param<Scalar>& w, Param<Scalar>& b, LoraDelta<Scalar>* delta) {
  auto& g = x.graph();
  auto y = linear(x, g.param(w), g.param(b));
  return delta ? y + delta->apply(x) : y;
}

}  // namespace

template <typename Scalar>
template <typename Other>
AdapterParams<Other> AdapterParams<Scalar>::cast() const {
  AdapterParams<Other> out;
  out.rank = rank;
  out.blocks.resize(blocks.size());
  auto& self = const_cast<AdapterParams<Scalar>&>(*this);
  auto from = self.params();
  auto to = out.params();
  for (std::size_t i = 0; i < from.size(); ++i) *to[i] = from[i]->template cast<Other>();
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    for (int i = 0; i < 4; ++i) {
      out.blocks[b].spatial.pos[i].rank = blocks[b].spatial.pos[i].rank;
      out.blocks[b].spatial.neg[i].rank = blocks[b].spatial.neg[i].rank;
      out.blocks[b].spatial.pos[i].scaling = blocks[b].spatial.pos[i].scaling;
      out.blocks[b].spatial.neg[i].scaling = blocks[b].spatial.neg[i].scaling;
    }
    out.blocks[b].ffn0.rank = blocks[b].ffn0.rank;
    out.blocks[b].ffn2.rank = blocks[b].ffn2.rank;
    out.blocks[b].ffn0.scaling = blocks[b].ffn0.scaling;
    out.blocks[b].ffn2.scaling = blocks[b].ffn2.scaling;
  }
  return out;
}

template <typename Scalar>
AdapterParams<Scalar> init_adapter(const BackboneParams<Scalar>& base, int rank, std::uint64_t seed) {
  const ModelConfig& cfg = base.config;
  const Index d = cfg.dim, hid = cfg.ffn_hidden;
  if (rank <= 0 || rank > std::min(d, hid)) {
    throw std::invalid_argument("adapter rank " + std::to_string(rank) + " outside [1, " +
                                std::to_string(std::min(d, hid)) + "]");
  }
  std::mt19937_64 rng(seed);
  AdapterParams<Scalar> a;
  a.rank = rank;
  for (std::size_t bi = 0; bi < base.blocks.size(); ++bi) {
    const auto& src = base.blocks[bi].attn;
    const std::string pre = "blocks." + std::to_string(bi) + ".";
    AdapterBlock<Scalar> blk;
    auto& fr = blk.spatial.frozen;
    const std::string sp = pre + "spatial.";
    fr.q_weight = frozen_copy(src.q_weight, sp + "q.weight");
    fr.q_bias = frozen_copy(src.q_bias, sp + "q.bias");
    fr.k_weight = frozen_copy(src.k_weight, sp + "k.weight");
    fr.k_bias = frozen_copy(src.k_bias, sp + "k.bias");
    fr.v_weight = frozen_copy(src.v_weight, sp + "v.weight");
    fr.v_bias = frozen_copy(src.v_bias, sp + "v.bias");
    fr.o_weight = frozen_copy(src.o_weight, sp + "o.weight");
    fr.o_bias = frozen_copy(src.o_bias, sp + "o.bias");
    for (int i = 0; i < 4; ++i) {
      blk.spatial.pos[i] = make_lora<Scalar>(pre + "spa_pos." + kProjections[i], d, d, rank, rng);
    }
    for (int i = 0; i < 4; ++i) {
      blk.spatial.neg[i] = make_lora<Scalar>(pre + "spa_neg." + kProjections[i], d, d, rank, rng);
    }
    blk.ffn0 = make_lora<Scalar>(pre + "ffn.0", d, hid, rank, rng);
    blk.ffn2 = make_lora<Scalar>(pre + "ffn.2", hid, d, rank, rng);
    a.blocks.push_back(std::move(blk));
  }
  return a;
}

template <typename Scalar>
std::vector<NamedDelta<Scalar>> trainable_parameters(AdapterParams<Scalar>& adapter) {
  std::vector<NamedDelta<Scalar>> out;
  for (std::size_t bi = 0; bi < adapter.blocks.size(); ++bi) {
    auto& b = adapter.blocks[bi];
    const std::string pre = "blocks." + std::to_string(bi) + ".";
    for (int i = 0; i < 4; ++i) out.push_back({pre + "spa_pos." + kProjections[i], &b.spatial.pos[i]});
    for (int i = 0; i < 4; ++i) out.push_back({pre + "spa_neg." + kProjections[i], &b.spatial.neg[i]});
    out.push_back({pre + "ffn.0", &b.ffn0});
    out.push_back({pre + "ffn.2", &b.ffn2});
  }
  return out;
}

template <typename Scalar>
std::vector<Param<Scalar>*> trainable_params(AdapterParams<Scalar>& adapter) {
  std::vector<Param<Scalar>*> out;
  for (auto& nd : trainable_parameters(adapter)) {
    out.push_back(&nd.delta->down);
    out.push_back(&nd.delta->up);
  }
  return out;
}

std::vector<PositionTriple> spatial_positions(Index f, Index h, Index w) {
  (void)f;  // every frame row uses the same temporal index 0
  std::vector<PositionTriple> out;
  out.reserve(static_cast<std::size_t>(2 * h * w));
  for (Index half = 0; half < 2; ++half) {
    for (Index y = 0; y < h; ++y) {
      for (Index x = 0; x < w; ++x) out.push_back({0, y, half * w + x});
    }
  }
  return out;
}

template <typename Scalar>
std::pair<Var<Scalar>, Var<Scalar>> spatial_branch_forward(Var<Scalar> h_z, Var<Scalar> h_c,
                                                           const GridGeometry& geo,
                                                           SpatialBranchParams<Scalar>& branch,
                                                           BranchSign sign,
                                                           const Tensor<Scalar>& angles, int heads) {
  const Index hw = geo.rows * geo.cols;
  if (h_z.shape() != h_c.shape() || h_z.dim(1) != geo.tokens() || angles.dim(0) != 2 * hw) {
    throw ShapeError("spatial branch: z " + shape_string(h_z.shape()) + " and c " +
                     shape_string(h_c.shape()) + " inconsistent with frame geometry " +
                     std::to_string(geo.frames) + "x" + std::to_string(geo.rows) + "x" +
                     std::to_string(geo.cols));
  }
  const Index b = h_z.dim(0), d = h_z.dim(2), rows = b * geo.frames;
  auto x = concat({reshape(h_z, {rows, hw, d}), reshape(h_c, {rows, hw, d})}, 1);
  auto& deltas = branch.deltas(sign);
  auto& fr = branch.frozen;
  auto q = project(x, fr.q_weight, fr.q_bias, &deltas[0]);
  auto k = project(x, fr.k_weight, fr.k_bias, &deltas[1]);
  auto v = project(x, fr.v_weight, fr.v_bias, &deltas[2]);
  auto out = project(rotary_attention(q, k, v, angles, heads), fr.o_weight, fr.o_bias, &deltas[3]);
  return {reshape(slice(out, 1, 0, hw), {b, geo.tokens(), d}),
          reshape(slice(out, 1, hw, hw), {b, geo.tokens(), d})};
}

template <typename Scalar>
DualPathContext<Scalar>::DualPathContext(const GridGeometry& g, const ModelConfig& config, bool spatial)
    : geometry(g), spatial_branches(spatial) {
  const auto lattice = grid_positions(g);
  angles_3d = rope3d_angles<Scalar>(lattice, config.head_dim(), config.rope_theta);
  const auto sp = spatial_positions(g.frames, g.rows, g.cols);
  angles_spatial = rope3d_angles<Scalar>(sp, config.head_dim(), config.rope_theta);
}

template <typename Scalar>
Var<Scalar> adapted_block_forward(Var<Scalar> x, Var<Scalar> cond_act, BlockParams<Scalar>& block,
                                  AdapterBlock<Scalar>& adapter, const DualPathContext<Scalar>& ctx,
                                  const ModelConfig& config) {
  if (x.dim(0) % 2 != 0 || cond_act.dim(0) != x.dim(0)) {
    throw ShapeError("adapted block expects stacked z/c streams, got " + shape_string(x.shape()));
  }
  const Index b = x.dim(0) / 2;
  const auto m = block_modulation(cond_act, block, config.dim);
  auto h = modulated_norm(x, block.norm_attn, m.shift_attn, m.scale_attn);
  auto attn = attention_3d(h, ctx.angles_3d, block.attn, config.heads);
  if (ctx.spatial_branches) {
    auto h_z = slice(h, 0, 0, b);
    auto h_c = slice(h, 0, b, b);
    auto [pz, pc] = spatial_branch_forward(h_z, h_c, ctx.geometry, adapter.spatial, BranchSign::pos,
                                           ctx.angles_spatial, config.heads);
    auto [nz, nc] = spatial_branch_forward(h_z, h_c, ctx.geometry, adapter.spatial, BranchSign::neg,
                                           ctx.angles_spatial, config.heads);
    attn = attn + concat({pz - nz, pc - nc}, 0);
  }
  x = x + m.gate_attn * attn;
  h = modulated_norm(x, block.norm_ffn, m.shift_ffn, m.scale_ffn);
  return x + m.gate_ffn * feed_forward(h, block, &adapter.ffn0, &adapter.ffn2);
}

namespace {

template <typename Scalar>
void check_streams(const Tensor<Scalar>& z, const Tensor<Scalar>& c, const GridGeometry& geo,
                   const ModelConfig& cfg, std::size_t batch) {
  if (z.shape() != c.shape()) {
    throw ShapeError("z stream " + shape_string(z.shape()) + " and c stream " +
                     shape_string(c.shape()) + " differ");
  }
  if (z.rank() != 3 || z.dim(1) != geo.tokens() || z.dim(2) != cfg.patch_dim()) {
    throw ShapeError("stream patches " + shape_string(z.shape()) +
                     " inconsistent with grid and patch width " + std::to_string(cfg.patch_dim()));
  }
  if (static_cast<std::size_t>(z.dim(0)) != batch) {
    throw std::invalid_argument("one timestep and task id per batch element required");
  }
  if (geo.frames > cfg.max_frames) {
    throw std::invalid_argument(std::to_string(geo.frames) + " frames exceed the limit of " +
                                std::to_string(cfg.max_frames));
  }
}

template <typename Scalar>
void record_probe(std::vector<Tensor<Scalar>>* probe, const std::vector<Var<Scalar>>& rows) {
  if (!probe) return;
  for (const auto& r : rows) probe->push_back(r.value().reshaped({r.value().size()}));
}

}  // namespace

template <typename Scalar>
Var<Scalar> adapted_forward_velocity(Graph<Scalar>& g, BackboneParams<Scalar>& base,
                                     AdapterParams<Scalar>& adapter, const Tensor<Scalar>& z_patches,
                                     const Tensor<Scalar>& c_patches, const GridGeometry& geometry,
                                     std::span<const int> task_ids, std::span<const double> t,
                                     const DualPathOptions<Scalar>& options) {
  const ModelConfig& cfg = base.config;
  check_streams(z_patches, c_patches, geometry, cfg, t.size());
  if (adapter.blocks.size() != base.blocks.size()) {
    throw std::invalid_argument("adapter has " + std::to_string(adapter.blocks.size()) +
                                " blocks, backbone has " + std::to_string(base.blocks.size()));
  }
  const Index b = z_patches.dim(0);
  auto embed = [&](const Tensor<Scalar>& patches) {
    return linear(g.constant(patches), g.param(base.patch_weight), g.param(base.patch_bias));
  };
  std::vector<Var<Scalar>> z_time, c_time;
  const std::vector<double> zeros(t.size(), 0.0);
  auto cond_z = conditioning(g, base, t, task_ids, &z_time);
  auto cond_c = conditioning(g, base, std::span<const double>(zeros), task_ids, &c_time);
  record_probe(options.z_time_probe, z_time);
  record_probe(options.c_time_probe, c_time);
  auto act = silu(concat({cond_z, cond_c}, 0));

  const DualPathContext<Scalar> ctx(geometry, cfg, options.spatial_branches);
  auto x = concat({embed(z_patches), embed(c_patches)}, 0);
  for (std::size_t i = 0; i < base.blocks.size(); ++i) {
    x = adapted_block_forward(x, act, base.blocks[i], adapter.blocks[i], ctx, cfg);
  }
  return velocity_head(slice(x, 0, 0, b), slice(act, 0, 0, b), base);
}

template <typename Scalar>
std::vector<Param<Scalar>*> direct_tuning_params(BackboneParams<Scalar>& params) {
  std::vector<Param<Scalar>*> out;
  for (auto& b : params.blocks) {
    b.attn.visit([&](Param<Scalar>& p) { out.push_back(&p); });
    for (auto* p : {&b.ffn0_weight, &b.ffn0_bias, &b.ffn2_weight, &b.ffn2_bias}) out.push_back(p);
  }
  for (auto* p : out) p->trainable = true;
  return out;
}

template <typename Scalar>
Var<Scalar> direct_forward_velocity(Graph<Scalar>& g, BackboneParams<Scalar>& p,
                                    const Tensor<Scalar>& z_patches, const Tensor<Scalar>& c_patches,
                                    const GridGeometry& geometry, std::span<const int> task_ids,
                                    std::span<const double> t) {
  const ModelConfig& cfg = p.config;
  check_streams(z_patches, c_patches, geometry, cfg, t.size());
  const Index n = geometry.tokens();
  auto embed = [&](const Tensor<Scalar>& patches) {
    return linear(g.constant(patches), g.param(p.patch_weight), g.param(p.patch_bias));
  };
  const std::vector<double> zeros(t.size(), 0.0);
  auto act_z = silu(conditioning(g, p, t, task_ids));
  auto act_c = silu(conditioning(g, p, std::span<const double>(zeros), task_ids));

  auto positions = grid_positions(geometry);
  for (Index i = 0; i < n; ++i) {
    PositionTriple q = positions[static_cast<std::size_t>(i)];
    q.w += geometry.cols;
    positions.push_back(q);
  }
  const Tensor<Scalar> angles = rope3d_angles<Scalar>(positions, cfg.head_dim(), cfg.rope_theta);

  auto xz = embed(z_patches);
  auto xc = embed(c_patches);
  for (auto& block : p.blocks) {
    const auto mz = block_modulation(act_z, block, cfg.dim);
    const auto mc = block_modulation(act_c, block, cfg.dim);
    auto h = concat({modulated_norm(xz, block.norm_attn, mz.shift_attn, mz.scale_attn),
                     modulated_norm(xc, block.norm_attn, mc.shift_attn, mc.scale_attn)},
                    1);
    auto a = attention_3d(h, angles, block.attn, cfg.heads);
    xz = xz + mz.gate_attn * slice(a, 1, 0, n);
    xc = xc + mc.gate_attn * slice(a, 1, n, n);
    xz = xz + mz.gate_ffn * feed_forward(modulated_norm(xz, block.norm_ffn, mz.shift_ffn, mz.scale_ffn), block);
    xc = xc + mc.gate_ffn * feed_forward(modulated_norm(xc, block.norm_ffn, mc.shift_ffn, mc.scale_ffn), block);
  }
  return velocity_head(xz, act_z, p);
}

#define VIFEEDIT_INSTANTIATE(S)                                                                      \
  template AdapterParams<S> init_adapter(const BackboneParams<S>&, int, std::uint64_t);              \
  template std::vector<NamedDelta<S>> trainable_parameters(AdapterParams<S>&);                       \
  template std::vector<Param<S>*> trainable_params(AdapterParams<S>&);                               \
  template std::pair<Var<S>, Var<S>> spatial_branch_forward(Var<S>, Var<S>, const GridGeometry&,     \
                                                            SpatialBranchParams<S>&, BranchSign,     \
                                                            const Tensor<S>&, int);                  \
  template struct DualPathContext<S>;                                                                \
  template Var<S> adapted_block_forward(Var<S>, Var<S>, BlockParams<S>&, AdapterBlock<S>&,           \
                                        const DualPathContext<S>&, const ModelConfig&);              \
  template Var<S> adapted_forward_velocity(Graph<S>&, BackboneParams<S>&, AdapterParams<S>&,         \
                                           const Tensor<S>&, const Tensor<S>&, const GridGeometry&,  \
                                           std::span<const int>, std::span<const double>,            \
                                           const DualPathOptions<S>&);                               \
  template std::vector<Param<S>*> direct_tuning_params(BackboneParams<S>&);                          \
  template Var<S> direct_forward_velocity(Graph<S>&, BackboneParams<S>&, const Tensor<S>&,           \
                                          const Tensor<S>&, const GridGeometry&,                     \
                                          std::span<const int>, std::span<const double>);

VIFEEDIT_INSTANTIATE(float)
VIFEEDIT_INSTANTIATE(double)
template AdapterParams<double> AdapterParams<float>::cast<double>() const;
template AdapterParams<float> AdapterParams<double>::cast<float>() const;
template AdapterParams<float> AdapterParams<float>::cast<float>() const;
template AdapterParams<double> AdapterParams<double>::cast<double>() const;

#undef VIFEEDIT_INSTANTIATE

}  // namespace vifeedit
