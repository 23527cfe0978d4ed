#include "vifeedit/sampler.hpp"

namespace vifeedit {

void SampleConfig::validate() const {
  if (steps < 1) throw std::invalid_argument("steps must be >= 1");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("alpha must lie in [0, 1]");
}

Video edit_video(const Video& source, int task_id, EditModel& model, const SampleConfig& config,
                 EditProbe* probe) {
  const ModelConfig& mc = model.config();
  if (source.rank() != 4) throw ShapeError("edit_video expects [f, H, W, C], got " + shape_string(source.shape()));
  if (source.dim(0) > mc.max_frames) {
    throw std::invalid_argument("source has " + std::to_string(source.dim(0)) + " frames; the limit is " +
                                std::to_string(mc.max_frames));
  }
  if (source.dim(3) != mc.channels) {
    throw ShapeError("source has " + std::to_string(source.dim(3)) + " channels, model expects " +
                     std::to_string(mc.channels));
  }
  if (config.alpha == 0.0) return source;
  config.validate();

  Shape batched = source.shape();
  batched.insert(batched.begin(), 1);
  const Tensor<float> c = to_patches(source.reshaped(batched), mc.patch);
  const GridGeometry geo{source.dim(0), source.dim(1) / mc.patch, source.dim(2) / mc.patch};
  const int tasks[1] = {task_id};

  std::mt19937_64 rng(config.seed);
  Tensor<float> z = sdedit_init(c, config.alpha, rng);
  DualPathOptions<float> options;
  if (probe) options.c_time_probe = &probe->c_time;
  const VelocityField<float> field = [&](const Tensor<float>& zt, double t) {
    Graph<float> g(false);
    const double ts[1] = {t};
    return model.velocity(g, zt, c, geo, tasks, ts, options).value();
  };
  z = euler_integrate(std::move(z), config.alpha, config.steps, field);
  Video out = from_patches(z, geo, mc.patch, mc.channels).reshaped(source.shape());
  out.data() = out.data().cwiseMax(0.0f).cwiseMin(1.0f);
  return out;
}

}  // namespace vifeedit
