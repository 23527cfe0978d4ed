#include "vifeedit/model.hpp"

#include <set>
#include <stdexcept>

namespace vifeedit {

using nlohmann::json;

std::string method_name(Method m) { return m == Method::vifeedit ? "vifeedit" : "direct-tuning"; }

Method method_from_name(const std::string& name) {
  if (name == "vifeedit") return Method::vifeedit;
  if (name == "direct-tuning") return Method::direct_tuning;
  throw std::invalid_argument("unknown method '" + name + "' (expected vifeedit or direct-tuning)");
}

json model_config_to_json(const ModelConfig& c) {
  return {{"blocks", c.blocks},         {"d", c.dim},
          {"heads", c.heads},           {"time_dim", c.time_dim},
          {"ffn_hidden", c.ffn_hidden}, {"patch", c.patch},
          {"channels", c.channels},     {"num_tasks", c.num_tasks},
          {"max_frames", c.max_frames}, {"rope_theta", c.rope_theta}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "blocks") c.blocks = value.get<int>();
    else if (key == "d") c.dim = value.get<int>();
    else if (key == "heads") c.heads = value.get<int>();
    else if (key == "time_dim") c.time_dim = value.get<int>();
    else if (key == "ffn_hidden") c.ffn_hidden = value.get<int>();
    else if (key == "patch") c.patch = value.get<int>();
    else if (key == "channels") c.channels = value.get<int>();
    else if (key == "num_tasks") c.num_tasks = value.get<int>();
    else if (key == "max_frames") c.max_frames = value.get<int>();
    else if (key == "rope_theta") c.rope_theta = value.get<double>();
    else throw std::invalid_argument("unknown key 'model." + key + "'");
  }
  c.validate();
  return c;
}

Var<float> EditModel::velocity(Graph<float>& g, const Tensor<float>& z, const Tensor<float>& c,
                               const GridGeometry& geometry, std::span<const int> task_ids,
                               std::span<const double> t, const DualPathOptions<float>& options) {
  if (method == Method::direct_tuning) return direct_forward_velocity(g, base, z, c, geometry, task_ids, t);
  return adapted_forward_velocity(g, base, adapter, z, c, geometry, task_ids, t, options);
}

std::vector<Param<float>*> EditModel::trainable() {
  std::vector<Param<float>*> out;
  for (auto* p : params()) {
    if (p->trainable) out.push_back(p);
  }
  return out;
}

std::vector<Param<float>*> EditModel::protected_params() {
  std::vector<Param<float>*> out;
  if (method == Method::vifeedit) {
    for (auto* p : params()) {
      if (p->role != ParamRole::delta) out.push_back(p);
    }
    return out;
  }
  std::set<const Param<float>*> tuned;
  for (auto& b : base.blocks) {
    b.attn.visit([&](Param<float>& p) { tuned.insert(&p); });
    for (auto* p : {&b.ffn0_weight, &b.ffn0_bias, &b.ffn2_weight, &b.ffn2_bias}) tuned.insert(p);
  }
  for (auto* p : params()) {
    if (!tuned.count(p)) out.push_back(p);
  }
  return out;
}

std::vector<Param<float>*> EditModel::params() {
  auto out = base.params();
  for (auto* p : adapter.params()) out.push_back(p);
  return out;
}

EditModel make_model(const ModelConfig& config, Method method, int rank, std::uint64_t base_seed,
                     std::uint64_t adapter_seed, const BackboneInit& init) {
  EditModel m;
  m.method = method;
  m.base = init_backbone<float>(config, base_seed, init);
  if (method == Method::vifeedit) {
    m.adapter = init_adapter(m.base, rank, adapter_seed);
  } else {
    direct_tuning_params(m.base);
  }
  return m;
}

Checkpoint model_checkpoint(EditModel& model, const OptimizerState<float>* optimizer, json metadata) {
  Checkpoint ck;
  ck.metadata = std::move(metadata);
  ck.metadata["model"] = model_config_to_json(model.config());
  ck.metadata["method"] = method_name(model.method);
  ck.metadata["rank"] = model.adapter.rank;
  const auto params = model.params();
  append_params(ck, params);
  if (optimizer) {
    const auto trainable = model.trainable();
    if (optimizer->first_moment.size() != trainable.size()) {
      throw std::logic_error("optimizer state does not match the trainable parameter list");
    }
    ck.metadata["optimizer_step"] = optimizer->step;
    for (std::size_t i = 0; i < trainable.size(); ++i) {
      ck.entries.push_back({"adam.m." + trainable[i]->name, optimizer->first_moment[i], false, ParamRole::moment});
      ck.entries.push_back({"adam.v." + trainable[i]->name, optimizer->second_moment[i], false, ParamRole::moment});
    }
  }
  return ck;
}

EditModel load_model(const Checkpoint& ck, OptimizerState<float>* optimizer) {
  const ModelConfig config = model_config_from_json(ck.metadata.at("model"));
  const Method method = method_from_name(ck.metadata.at("method").get<std::string>());
  EditModel m = make_model(config, method, ck.metadata.at("rank").get<int>(), 0, 0);
  const auto params = m.params();
  restore_params(ck, params);
  if (optimizer && ck.metadata.contains("optimizer_step")) {
    const auto trainable = m.trainable();
    *optimizer = OptimizerState<float>::for_params(trainable, optimizer->config);
    optimizer->step = ck.metadata.at("optimizer_step").get<std::int64_t>();
    for (std::size_t i = 0; i < trainable.size(); ++i) {
      optimizer->first_moment[i] = ck.find("adam.m." + trainable[i]->name).value;
      optimizer->second_moment[i] = ck.find("adam.v." + trainable[i]->name).value;
    }
  }
  return m;
}

}  // namespace vifeedit
