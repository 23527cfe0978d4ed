#pragma once

#include "vifeedit/backbone.hpp"

#include <array>
#include <string>
#include <vector>

namespace vifeedit {

inline constexpr int kDefaultRank = 32;

enum class BranchSign { pos, neg };

/// Spatial attention branches of one block. Both signs read the same frozen
/// copy of the block's 3D attention and differ only by their low-rank deltas
/// (index order q, k, v, o).
template <typename Scalar>
struct SpatialBranchParams {
  AttentionParams<Scalar> frozen;
  std::array<LoraDelta<Scalar>, 4> pos;
  std::array<LoraDelta<Scalar>, 4> neg;

  std::array<LoraDelta<Scalar>, 4>& deltas(BranchSign s) { return s == BranchSign::pos ? pos : neg; }
};

template <typename Scalar>
struct AdapterBlock {
  SpatialBranchParams<Scalar> spatial;
  LoraDelta<Scalar> ffn0;
  LoraDelta<Scalar> ffn2;
};

template <typename Scalar>
struct NamedDelta {
  std::string name;
  LoraDelta<Scalar>* delta = nullptr;
};

template <typename Scalar>
struct AdapterParams {
  int rank = kDefaultRank;
  std::vector<AdapterBlock<Scalar>> blocks;

  /// Frozen copies first, then deltas, block by block.
  template <typename F>
  void visit(F&& f) {
    for (auto& b : blocks) {
      b.spatial.frozen.visit(f);
      for (auto& d : b.spatial.pos) d.visit(f);
      for (auto& d : b.spatial.neg) d.visit(f);
      b.ffn0.visit(f);
      b.ffn2.visit(f);
    }
  }

  std::vector<Param<Scalar>*> params() {
    std::vector<Param<Scalar>*> out;
    visit([&](Param<Scalar>& p) { out.push_back(&p); });
    return out;
  }

  template <typename Other>
  AdapterParams<Other> cast() const;
};

/// Installs frozen attention copies and zero-effect deltas for every block.
/// Throws std::invalid_argument for a rank outside [1, min(d_in, d_out)].
template <typename Scalar>
AdapterParams<Scalar> init_adapter(const BackboneParams<Scalar>& base, int rank, std::uint64_t seed);

/// The deltas the optimizer may touch: per block the pos/neg q, k, v, o
/// deltas and the ffn.0/ffn.2 deltas.
template <typename Scalar>
std::vector<NamedDelta<Scalar>> trainable_parameters(AdapterParams<Scalar>& adapter);

/// Flat list of the down/up factors of trainable_parameters.
template <typename Scalar>
std::vector<Param<Scalar>*> trainable_params(AdapterParams<Scalar>& adapter);

/// Positions of one frame row of the concatenated [Z | C] sequence: Z tokens
/// at (0, y, x), C tokens at (0, y, x + w). Z tokens come first.
std::vector<PositionTriple> spatial_positions(Index f, Index h, Index w);

/// Attention inside each frame over the 2hw tokens of [Z frame; C frame].
/// h_z, h_c: [B, f*h*w, d]. Returns the (z, c) halves of the output.
template <typename Scalar>
std::pair<Var<Scalar>, Var<Scalar>> spatial_branch_forward(Var<Scalar> h_z, Var<Scalar> h_c,
                                                           const GridGeometry& geometry,
                                                           SpatialBranchParams<Scalar>& branch,
                                                           BranchSign sign,
                                                           const Tensor<Scalar>& angles, int heads);

/// Instrumentation and ablation switches for the dual-path forward pass.
template <typename Scalar>
struct DualPathOptions {
  bool spatial_branches = true;
  /// Receives the timestep-embedding part of the c-stream modulation input,
  /// one row per batch element.
  std::vector<Tensor<Scalar>>* c_time_probe = nullptr;
  /// Same for the z stream.
  std::vector<Tensor<Scalar>>* z_time_probe = nullptr;
};

/// Geometry-dependent constants shared by every block.
template <typename Scalar>
struct DualPathContext {
  GridGeometry geometry;
  Tensor<Scalar> angles_3d;       // native lattice positions
  Tensor<Scalar> angles_spatial;  // spatial_positions
  bool spatial_branches = true;

  DualPathContext(const GridGeometry& g, const ModelConfig& config, bool spatial = true);
};

/// x stacks the z stream [B, N, d] above the c stream [B, N, d] on the batch
/// axis, and cond_act stacks their modulation inputs the same way. Computes
/// Attn3D(X) + SpaPos(X') - SpaNeg(X'), then the shared FFN with its deltas.
template <typename Scalar>
Var<Scalar> adapted_block_forward(Var<Scalar> x, Var<Scalar> cond_act, BlockParams<Scalar>& block,
                                  AdapterBlock<Scalar>& adapter, const DualPathContext<Scalar>& ctx,
                                  const ModelConfig& config);

/// Velocity patches [B, N, P] for the z stream. c_patches holds the clean
/// source; it is modulated with t = 0 regardless of `t`.
template <typename Scalar>
Var<Scalar> adapted_forward_velocity(Graph<Scalar>& g, BackboneParams<Scalar>& base,
                                     AdapterParams<Scalar>& adapter, const Tensor<Scalar>& z_patches,
                                     const Tensor<Scalar>& c_patches, const GridGeometry& geometry,
                                     std::span<const int> task_ids, std::span<const double> t,
                                     const DualPathOptions<Scalar>& options = {});

// Direct-tuning baseline: Z and C share one 3D attention sequence (C placed
// beside Z on the w axis), every base q, k, v, o and ffn projection is
// trainable, and there are no spatial branches.

/// Marks the direct-tuning trainable set on `params` and returns it.
template <typename Scalar>
std::vector<Param<Scalar>*> direct_tuning_params(BackboneParams<Scalar>& params);

template <typename Scalar>
Var<Scalar> direct_forward_velocity(Graph<Scalar>& g, BackboneParams<Scalar>& params,
                                    const Tensor<Scalar>& z_patches, const Tensor<Scalar>& c_patches,
                                    const GridGeometry& geometry, std::span<const int> task_ids,
                                    std::span<const double> t);

}  // namespace vifeedit
