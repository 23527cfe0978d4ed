#include "vifeedit/run_config.hpp"

#include "vifeedit/io.hpp"

#include <functional>
#include <map>
#include <sstream>

namespace vifeedit {

using nlohmann::json;

namespace {

using Setter = std::function<void(const json&)>;

void apply_section(const std::string& section, const json& j, const std::map<std::string, Setter>& setters) {
  if (!j.is_object()) throw std::invalid_argument("config section '" + section + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    const auto it = setters.find(key);
    if (it == setters.end()) throw std::invalid_argument("unknown key '" + section + "." + key + "'");
    try {
      it->second(value);
    } catch (const json::exception& e) {
      throw std::invalid_argument("bad value for '" + section + "." + key + "': " + e.what());
    }
  }
}

template <typename T>
Setter set(T& field) {
  return [&field](const json& v) { field = v.get<T>(); };
}

Setter set_path(std::filesystem::path& field) {
  return [&field](const json& v) { field = v.get<std::string>(); };
}

Setter set_optional(std::optional<double>& field) {
  return [&field](const json& v) {
    if (v.is_null()) field.reset();
    else field = v.get<double>();
  };
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

std::vector<EditTask> parse_tasks(const std::vector<std::string>& names) {
  std::vector<EditTask> out;
  for (const auto& n : names) out.push_back(task_from_name(n));
  return out;
}

json RunConfig::to_json() const {
  return {{"model", model_config_to_json(model)},
          {"train",
           {{"method", method_name(method)},
            {"lr", train.learning_rate},
            {"weight_decay", train.weight_decay},
            {"schedule", train.schedule},
            {"rank", train.rank},
            {"epochs", train.epochs},
            {"batch_size", train.batch_size},
            {"seed", train.seed},
            {"adapter_seed", adapter_seed}}},
          {"sample", {{"steps", sample.steps}, {"alpha", sample.alpha}, {"seed", sample.seed}}},
          {"pretrain",
           {{"steps", pretrain.steps},
            {"batch_size", pretrain.batch_size},
            {"lr", pretrain.learning_rate},
            {"frames", pretrain.frames},
            {"seed", pretrain.seed}}},
          {"data",
           {{"task", data.tasks},
            {"n_pairs", data.n_pairs},
            {"seed", data.seed},
            {"canvas", data.canvas},
            {"eval_videos", data.eval_videos},
            {"eval_frames", data.eval_frames},
            {"eval_seed", data.eval_seed}}},
          {"paths",
           {{"data", paths.data.string()},
            {"eval_data", paths.eval_data.string()},
            {"out", paths.out.string()},
            {"base", paths.base.string()}}},
          {"eval",
           {{"min_psnr_mean", optional_json(eval.min_psnr_mean)},
            {"max_frozen_fraction", optional_json(eval.max_frozen_fraction)},
            {"min_motion_energy_ratio", optional_json(eval.min_motion_energy_ratio)},
            {"tau", eval.tau}}}};
}

RunConfig RunConfig::from_json(const json& j) {
  if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");
  RunConfig c;
  std::string method = method_name(c.method);
  for (const auto& [section, body] : j.items()) {
    if (section == "model") {
      c.model = model_config_from_json(body);
    } else if (section == "train") {
      apply_section(section, body,
                    {{"method", set(method)},
                     {"lr", set(c.train.learning_rate)},
                     {"weight_decay", set(c.train.weight_decay)},
                     {"schedule", set(c.train.schedule)},
                     {"rank", set(c.train.rank)},
                     {"epochs", set(c.train.epochs)},
                     {"batch_size", set(c.train.batch_size)},
                     {"seed", set(c.train.seed)},
                     {"adapter_seed", set(c.adapter_seed)}});
    } else if (section == "sample") {
      apply_section(section, body,
                    {{"steps", set(c.sample.steps)}, {"alpha", set(c.sample.alpha)}, {"seed", set(c.sample.seed)}});
    } else if (section == "pretrain") {
      apply_section(section, body,
                    {{"steps", set(c.pretrain.steps)},
                     {"batch_size", set(c.pretrain.batch_size)},
                     {"lr", set(c.pretrain.learning_rate)},
                     {"frames", set(c.pretrain.frames)},
                     {"seed", set(c.pretrain.seed)}});
    } else if (section == "data") {
      apply_section(section, body,
                    {{"task",
                      [&](const json& v) {
                        if (v.is_string()) c.data.tasks = {v.get<std::string>()};
                        else c.data.tasks = v.get<std::vector<std::string>>();
                      }},
                     {"n_pairs", set(c.data.n_pairs)},
                     {"seed", set(c.data.seed)},
                     {"canvas", set(c.data.canvas)},
                     {"eval_videos", set(c.data.eval_videos)},
                     {"eval_frames", set(c.data.eval_frames)},
                     {"eval_seed", set(c.data.eval_seed)}});
    } else if (section == "paths") {
      apply_section(section, body,
                    {{"data", set_path(c.paths.data)},
                     {"eval_data", set_path(c.paths.eval_data)},
                     {"out", set_path(c.paths.out)},
                     {"base", set_path(c.paths.base)}});
    } else if (section == "eval") {
      apply_section(section, body,
                    {{"min_psnr_mean", set_optional(c.eval.min_psnr_mean)},
                     {"max_frozen_fraction", set_optional(c.eval.max_frozen_fraction)},
                     {"min_motion_energy_ratio", set_optional(c.eval.min_motion_energy_ratio)},
                     {"tau", set(c.eval.tau)}});
    } else {
      throw std::invalid_argument("unknown config section '" + section + "'");
    }
  }
  c.method = method_from_name(method);
  c.pretrain.canvas = c.data.canvas;
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
  return from_json(j);
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  sample.validate();
  pretrain.validate();
  if (data.tasks.empty()) throw std::invalid_argument("data.task must name at least one task");
  (void)parse_tasks(data.tasks);
  if (data.n_pairs < 1) throw std::invalid_argument("data.n_pairs must be >= 1");
  if (data.canvas < 1 || data.canvas % model.patch != 0) {
    throw std::invalid_argument("data.canvas must be a positive multiple of model.patch");
  }
  if (data.eval_videos < 1) throw std::invalid_argument("data.eval_videos must be >= 1");
  if (data.eval_frames < 1 || data.eval_frames > model.max_frames) {
    throw std::invalid_argument("data.eval_frames must lie in [1, model.max_frames]");
  }
  for (const auto& name : data.tasks) {
    if (task_id(task_from_name(name)) >= model.num_tasks) {
      throw std::invalid_argument("task '" + name + "' has no prompt row (model.num_tasks = " +
                                  std::to_string(model.num_tasks) + ")");
    }
  }
  if (!(eval.tau > 0.0)) throw std::invalid_argument("eval.tau must be positive");
}

Checkpoint backbone_checkpoint(BackboneParams<float>& base, const PretrainConfig& pretrain) {
  Checkpoint ck;
  ck.metadata = {{"kind", "backbone"},
                 {"model", model_config_to_json(base.config)},
                 {"pretrain",
                  {{"steps", pretrain.steps},
                   {"batch_size", pretrain.batch_size},
                   {"lr", pretrain.learning_rate},
                   {"frames", pretrain.frames},
                   {"canvas", pretrain.canvas},
                   {"seed", pretrain.seed}}}};
  const auto params = base.params();
  append_params(ck, params);
  return ck;
}

BackboneParams<float> load_backbone(const std::filesystem::path& path) {
  const Checkpoint ck = load_checkpoint(path);
  if (ck.metadata.value("kind", "") != "backbone") {
    throw std::invalid_argument(path.string() + " is not a backbone checkpoint");
  }
  BackboneParams<float> base = init_backbone<float>(model_config_from_json(ck.metadata.at("model")), 0);
  const auto params = base.params();
  restore_params(ck, params);
  return base;
}

BackboneParams<float> load_or_pretrain_base(const RunConfig& config, const LogFn& log) {
  if (std::filesystem::exists(config.paths.base)) {
    BackboneParams<float> base = load_backbone(config.paths.base);
    if (model_config_to_json(base.config) != model_config_to_json(config.model)) {
      throw std::invalid_argument(config.paths.base.string() + " was built for a different model config");
    }
    return base;
  }
  if (log) {
    log("pretraining backbone (" + std::to_string(config.pretrain.steps) + " steps) -> " +
        config.paths.base.string());
  }
  BackboneParams<float> base = init_backbone<float>(config.model, config.pretrain.seed);
  double window = 0.0;
  int count = 0;
  pretrain_backbone(base, config.pretrain, [&](int step, double loss) {
    window += loss;
    ++count;
    if (log && (step % 250 == 0 || step == config.pretrain.steps)) {
      std::ostringstream line;
      line << "  pretrain step " << step << " mean loss " << window / count;
      log(line.str());
      window = 0.0;
      count = 0;
    }
  });
  if (config.paths.base.has_parent_path()) std::filesystem::create_directories(config.paths.base.parent_path());
  save_checkpoint(config.paths.base, backbone_checkpoint(base, config.pretrain));
  return base;
}

EditModel model_from_base(const BackboneParams<float>& base, Method method, int rank, std::uint64_t adapter_seed) {
  EditModel m;
  m.method = method;
  m.base = base;
  for (auto* p : m.base.params()) p->trainable = false;
  if (method == Method::vifeedit) m.adapter = init_adapter(m.base, rank, adapter_seed);
  else direct_tuning_params(m.base);
  return m;
}

}  // namespace vifeedit
