#pragma once

#include "vifeedit/adapter.hpp"
#include "vifeedit/checkpoint.hpp"
#include "vifeedit/optim.hpp"

#include "json.hpp"

#include <string>

namespace vifeedit {

enum class Method { vifeedit, direct_tuning };

std::string method_name(Method m);
Method method_from_name(const std::string& name);

nlohmann::json model_config_to_json(const ModelConfig& c);
/// Unknown keys are rejected; missing keys keep their defaults.
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Frozen backbone plus whatever the chosen method trains: the dual-path
/// adapter, or (direct tuning) the backbone's own attention and FFN weights.
struct EditModel {
  Method method = Method::vifeedit;
  BackboneParams<float> base;
  AdapterParams<float> adapter;

  Var<float> velocity(Graph<float>& g, const Tensor<float>& z_patches, const Tensor<float>& c_patches,
                      const GridGeometry& geometry, std::span<const int> task_ids,
                      std::span<const double> t, const DualPathOptions<float>& options = {});

  /// Every parameter flagged trainable, in params() order.
  std::vector<Param<float>*> trainable();
  /// Parameters the method promises never to change: the whole backbone and
  /// the frozen attention copies for ViFeEdit, everything outside the tuned
  /// projections for direct tuning. Decided by role, not by flag.
  std::vector<Param<float>*> protected_params();
  /// Backbone parameters followed by adapter parameters.
  std::vector<Param<float>*> params();
  const ModelConfig& config() const { return base.config; }
};

EditModel make_model(const ModelConfig& config, Method method, int rank, std::uint64_t base_seed,
                     std::uint64_t adapter_seed, const BackboneInit& init = {});

/// Serializes every parameter; when `optimizer` is given its moments follow
/// as role-moment entries and its step count goes into the metadata.
Checkpoint model_checkpoint(EditModel& model, const OptimizerState<float>* optimizer,
                            nlohmann::json metadata = nlohmann::json::object());

/// Rebuilds the model described by the checkpoint metadata and restores
/// every parameter. Restores optimizer moments when `optimizer` is non-null
/// and the checkpoint carries them.
EditModel load_model(const Checkpoint& ck, OptimizerState<float>* optimizer = nullptr);

}  // namespace vifeedit
