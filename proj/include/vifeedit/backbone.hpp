#pragma once

#include "vifeedit/autograd.hpp"
#include "vifeedit/lora.hpp"

#include <compare>
#include <cstdint>
#include <span>
#include <vector>

namespace vifeedit {

/// Desk-scale text-to-video DiT geometry. Defaults are the reference
/// configuration (4 blocks, width 128, 4 heads, 32x32 frames cut into 4x4
/// patches).
struct ModelConfig {
  int blocks = 4;
  int dim = 128;
  int heads = 4;
  int time_dim = 128;
  int ffn_hidden = 512;
  int patch = 4;
  int channels = 3;
  int num_tasks = 8;
  int max_frames = 16;
  double rope_theta = 10000.0;

  int head_dim() const { return dim / heads; }
  int patch_dim() const { return patch * patch * channels; }
  void validate() const;
};

/// Initialization knobs for the backbone weights (before pretraining).
struct BackboneInit {
  double modulation_std = 0.5;  // relative to 1/sqrt(time_dim)
  double gate_bias = 1.0;
};

struct PositionTriple {
  Index t = 0;
  Index h = 0;
  Index w = 0;
  auto operator<=>(const PositionTriple&) const = default;
};

struct GridGeometry {
  Index frames = 1;
  Index rows = 1;
  Index cols = 1;
  Index tokens() const { return frames * rows * cols; }
  auto operator<=>(const GridGeometry&) const = default;
};

/// Lattice positions in (t, h, w) order.
std::vector<PositionTriple> grid_positions(const GridGeometry& geometry);

/// Channels per axis of a rotary head: t and h get thirds rounded up to an
/// even count, w takes the (possibly empty) remainder.
struct RopeAxisSplit {
  int t = 0;
  int h = 0;
  int w = 0;
};
RopeAxisSplit rope_axis_split(int head_dim);

/// Rotation angles [tokens, head_dim / 2] for the given positions.
template <typename Scalar>
Tensor<Scalar> rope3d_angles(std::span<const PositionTriple> positions, int head_dim,
                             double theta = 10000.0);

/// video[B, f, H, W, C] -> patch vectors [B, f*h*w, p*p*C] in (t, h, w) order.
template <typename Scalar>
Tensor<Scalar> to_patches(const Tensor<Scalar>& video, int patch);

/// Inverse of to_patches.
template <typename Scalar>
Tensor<Scalar> from_patches(const Tensor<Scalar>& patches, const GridGeometry& geometry, int patch,
                            int channels);

template <typename Scalar>
struct TokenGrid {
  Tensor<Scalar> tokens;  // [B, N, d]
  std::vector<PositionTriple> positions;
  GridGeometry geometry;
};

template <typename Scalar>
struct AttentionParams {
  Param<Scalar> q_weight, q_bias, k_weight, k_bias, v_weight, v_bias, o_weight, o_bias;

  template <typename F>
  void visit(F&& f) {
    for (auto* p : {&q_weight, &q_bias, &k_weight, &k_bias, &v_weight, &v_bias, &o_weight, &o_bias}) {
      f(*p);
    }
  }
};

template <typename Scalar>
struct BlockParams {
  Param<Scalar> norm_attn;
  Param<Scalar> norm_ffn;
  AttentionParams<Scalar> attn;
  Param<Scalar> ffn0_weight, ffn0_bias, ffn2_weight, ffn2_bias;
  Param<Scalar> modulation_weight, modulation_bias;  // [6d, d_t] -> shift/scale/gate x2

  template <typename F>
  void visit(F&& f) {
    f(norm_attn);
    f(norm_ffn);
    attn.visit(f);
    for (auto* p : {&ffn0_weight, &ffn0_bias, &ffn2_weight, &ffn2_bias, &modulation_weight,
                    &modulation_bias}) {
      f(*p);
    }
  }
};

template <typename Scalar>
struct BackboneParams {
  ModelConfig config;
  Param<Scalar> patch_weight, patch_bias;
  Param<Scalar> time_weight1, time_bias1, time_weight2, time_bias2;
  Param<Scalar> prompt_table;  // [num_tasks, d_t]
  std::vector<BlockParams<Scalar>> blocks;
  Param<Scalar> final_norm, final_modulation_weight, final_modulation_bias;
  Param<Scalar> head_weight, head_bias;

  /// Visits every parameter in manifest order.
  template <typename F>
  void visit(F&& f) {
    for (auto* p : {&patch_weight, &patch_bias, &time_weight1, &time_bias1, &time_weight2,
                    &time_bias2, &prompt_table}) {
      f(*p);
    }
    for (auto& b : blocks) b.visit(f);
    for (auto* p : {&final_norm, &final_modulation_weight, &final_modulation_bias, &head_weight,
                    &head_bias}) {
      f(*p);
    }
  }

  std::vector<Param<Scalar>*> params() {
    std::vector<Param<Scalar>*> out;
    visit([&](Param<Scalar>& p) { out.push_back(&p); });
    return out;
  }

  template <typename Other>
  BackboneParams<Other> cast() const;
};

template <typename Scalar>
BackboneParams<Scalar> init_backbone(const ModelConfig& config, std::uint64_t seed,
                                     const BackboneInit& init = {});

/// Per-block AdaLN modulation vectors, each [B, 1, d].
template <typename Scalar>
struct Modulation {
  Var<Scalar> shift_attn, scale_attn, gate_attn, shift_ffn, scale_ffn, gate_ffn;
};

/// Log-spaced sinusoidal features of t (scaled by 1000), [cos | sin].
template <typename Scalar>
Tensor<Scalar> timestep_features(double t, int dim);

/// MLP(sinusoid(t)) as a [1, d_t] node. t must lie in [0, 1].
template <typename Scalar>
Var<Scalar> timestep_embed(Graph<Scalar>& g, BackboneParams<Scalar>& params, double t);

/// Value-only timestep embedding, shape [d_t].
template <typename Scalar>
Tensor<Scalar> timestep_embed(BackboneParams<Scalar>& params, double t);

/// Modulation input per batch element: timestep_embed(t_b) + prompt[task_b]
/// stacked to [B, d_t]. `time_embeddings` receives the timestep parts.
template <typename Scalar>
Var<Scalar> conditioning(Graph<Scalar>& g, BackboneParams<Scalar>& params,
                         std::span<const double> t, std::span<const int> task_ids,
                         std::vector<Var<Scalar>>* time_embeddings = nullptr);

template <typename Scalar>
Modulation<Scalar> block_modulation(Var<Scalar> cond_act, BlockParams<Scalar>& block, int dim);

/// rms_norm(x) * (1 + scale) + shift.
template <typename Scalar>
Var<Scalar> modulated_norm(Var<Scalar> x, Param<Scalar>& gain, Var<Scalar> shift,
                           Var<Scalar> scale);

/// [B, S, d] -> [B * heads, S, d / heads].
template <typename Scalar>
Var<Scalar> split_heads(Var<Scalar> x, int heads);

/// [B * heads, S, dh] -> [B, S, heads * dh].
template <typename Scalar>
Var<Scalar> merge_heads(Var<Scalar> x, int heads);

/// Multi-head rotary attention on already projected q, k, v [B, S, d].
template <typename Scalar>
Var<Scalar> rotary_attention(Var<Scalar> q, Var<Scalar> k, Var<Scalar> v,
                             const Tensor<Scalar>& angles, int heads);

/// Full attention over every token of each batch element.
template <typename Scalar>
Var<Scalar> attention_3d(Var<Scalar> h, const Tensor<Scalar>& angles, AttentionParams<Scalar>& attn,
                         int heads);

/// ffn.2(gelu(ffn.0(h))), each projection optionally carrying a low-rank delta.
template <typename Scalar>
Var<Scalar> feed_forward(Var<Scalar> h, BlockParams<Scalar>& block, LoraDelta<Scalar>* ffn0 = nullptr,
                         LoraDelta<Scalar>* ffn2 = nullptr);

/// Pre-norm gated residual block with 3D attention.
template <typename Scalar>
Var<Scalar> block_forward(Var<Scalar> x, const Tensor<Scalar>& angles, Var<Scalar> cond_act,
                          BlockParams<Scalar>& block, const ModelConfig& config);

/// Final modulated norm and linear head to patch-vector space.
template <typename Scalar>
Var<Scalar> velocity_head(Var<Scalar> x, Var<Scalar> cond_act, BackboneParams<Scalar>& params);

/// u(Z_t, C_T, t): patches[B, N, P] -> velocity patches [B, N, P].
template <typename Scalar>
Var<Scalar> forward_velocity(Graph<Scalar>& g, BackboneParams<Scalar>& params,
                             const Tensor<Scalar>& patches, const GridGeometry& geometry,
                             std::span<const int> task_ids, std::span<const double> t);

/// Pixel video [B, f, H, W, C] -> TokenGrid embedded by `weight` [d, P]
/// (+ `bias` [d] when given).
template <typename Scalar>
TokenGrid<Scalar> patchify(const Tensor<Scalar>& video, int patch, const Tensor<Scalar>& weight,
                           const Tensor<Scalar>* bias = nullptr);

/// unpatchify: TokenGrid -> pixel video through the patch-space head weights
/// `projection` [P, d] (no modulation, zero bias).
template <typename Scalar>
Tensor<Scalar> unpatchify(const TokenGrid<Scalar>& grid, const Tensor<Scalar>& projection, int patch,
                          int channels);

}  // namespace vifeedit
