#pragma once

#include "vifeedit/model.hpp"

#include <string>
#include <vector>

namespace vifeedit {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// Deliberate faults for the negative controls of `selftest`.
struct CheckHooks {
  bool unfreeze_base = false;    // mark one backbone matrix trainable before training
  bool nonzero_lora_up = false;  // set one LoRA up entry at init
};

/// |adapted - base| <= 1e-6 (1 + |base|) on `triples` random (Z_t, C, t)
/// draws for a freshly initialized adapter.
CheckResult check_init_identity(const ModelConfig& config, int triples, std::uint64_t seed,
                                const CheckHooks& hooks = {});

/// Perturbing one frame of either stream changes only that frame of the
/// spatial branch output.
CheckResult check_frame_isolation(const ModelConfig& config, std::uint64_t seed);

/// With the spatial branches ablated the z-stream velocity ignores C.
CheckResult check_path_exclusivity(const ModelConfig& config, std::uint64_t seed);

/// The c stream is modulated with timestep_embed(0) at every sampling step.
CheckResult check_c_timestep(const ModelConfig& config, int steps, std::uint64_t seed);

/// Spatial sequence positions: temporal index 0 and w indices exactly [0, 2w).
CheckResult check_spatial_positions(Index frames, Index h, Index w);

/// Every protected parameter is bit-identical after `steps` training steps.
CheckResult check_frozen_base(const ModelConfig& config, int steps, int batch_size, std::uint64_t seed,
                              const CheckHooks& hooks = {});

/// Finite differences of the flow-matching loss through a 64-bit adapted
/// model with `blocks` blocks of width `dim`.
CheckResult check_gradient(int blocks, int dim, int probes, double tolerance, std::uint64_t seed);

/// VVF, checkpoint and report serialization round trips.
CheckResult check_round_trips(std::uint64_t seed);

/// alpha = 0 editing returns the source bit-exactly.
CheckResult check_alpha_zero(const ModelConfig& config, std::uint64_t seed);

/// Every check above on micro models.
std::vector<CheckResult> run_selftest(const CheckHooks& hooks = {});

}  // namespace vifeedit
