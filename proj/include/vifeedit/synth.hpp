#pragma once

#include "vifeedit/io.hpp"
#include "vifeedit/tensor.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace vifeedit {

/// Pixel video [f, H, W, C], values in [0, 1].
using Video = Tensor<float>;
using Color = std::array<float, 3>;

enum class ShapeKind { circle, square, triangle };

struct ShapeSpec {
  ShapeKind kind = ShapeKind::square;
  Color color{1.0f, 1.0f, 1.0f};
  double size = 8.0;  // diameter / side length in pixels
  double x = 16.0;    // centre at frame 0
  double y = 16.0;
  double vx = 0.0;  // pixels per frame
  double vy = 0.0;

  bool operator==(const ShapeSpec&) const = default;
};

struct SceneSpec {
  int height = 32;
  int width = 32;
  Color background{0.0f, 0.0f, 0.0f};
  std::vector<ShapeSpec> shapes;
  int frames = 1;
  std::uint64_t seed = 0;

  bool operator==(const SceneSpec&) const = default;
};

/// Centre of `shape` at `frame` under linear motion reflected at the canvas
/// walls.
std::array<double, 2> shape_centre(const SceneSpec& spec, const ShapeSpec& shape, int frame);

/// Hard-edged rasterization in painter's order. Throws std::invalid_argument
/// when a shape does not fit inside the canvas at frame 0.
Video render_video(const SceneSpec& spec);

struct ChannelPermute {
  std::array<int, 3> perm{1, 2, 0};  // output channel i takes input channel perm[i]
};
struct ColorAffine {
  std::array<float, 9> matrix{0.393f, 0.769f, 0.189f, 0.349f, 0.686f, 0.168f, 0.272f, 0.534f, 0.131f};
  Color bias{0.0f, 0.0f, 0.0f};
};
struct ShapeRemove {
  int index = 0;
};
struct ShapeAdd {
  ShapeSpec shape{ShapeKind::square, {1.0f, 1.0f, 1.0f}, 8.0, 16.0, 16.0, 0.0, 0.0};
};
struct ShapeSwap {
  int index = 0;
  ShapeKind kind = ShapeKind::square;
};
struct ShapeRecolor {
  int index = 0;
  Color color{1.0f, 0.0f, 0.0f};
};
/// Source is the binary edge map of the scene, target the rendering.
struct EdgeCondition {};

using EditTask =
    std::variant<ChannelPermute, ColorAffine, ShapeRemove, ShapeAdd, ShapeSwap, ShapeRecolor, EdgeCondition>;

/// Task id used for prompt conditioning; the variant index.
inline int task_id(const EditTask& task) { return static_cast<int>(task.index()); }
std::string task_name(const EditTask& task);
/// Default-parameter task for a name such as "channel-permute". Throws
/// std::invalid_argument listing the valid names.
EditTask task_from_name(const std::string& name);
std::vector<std::string> task_names();

struct VideoPair {
  Video source;
  Video target;
};

/// Applies the pixel map of a pointwise color task.
Video apply_color_map(const Video& video, const EditTask& task);

/// Binary edge map: 1 where a pixel differs from one of its 4-neighbours.
Video edge_map(const Video& video);

/// Source and exact edited target for `spec`. Throws std::out_of_range for a
/// shape index outside the scene.
VideoPair apply_edit_oracle(const SceneSpec& spec, const EditTask& task);

enum class SeedDomain : std::uint64_t { train = 0, eval = 1 };

/// Scene seed of pair `index`. The domain occupies the low bit so training
/// and evaluation seeds can never coincide.
std::uint64_t scene_seed(std::uint64_t seed, std::uint64_t index, SeedDomain domain);

/// Random scene for `task`: 1 to 3 shapes of 6 to 12 px whose colors contrast
/// with the background. Shape-level tasks get a circle at index 0 and no other
/// circles.
SceneSpec random_scene(const EditTask& task, std::uint64_t seed, int frames, int height = 32,
                       int width = 32);

struct DatasetOptions {
  std::vector<EditTask> tasks{ChannelPermute{}};
  int pairs_per_task = 250;
  std::uint64_t seed = 0;
  int frames = 1;  // 1 for training sets
  SeedDomain domain = SeedDomain::train;
  int height = 32;
  int width = 32;
};

struct DatasetEntry {
  std::string id;
  int task_id = 0;
  std::filesystem::path source;
  std::filesystem::path target;
};

struct Dataset {
  std::filesystem::path root;
  std::uint64_t seed = 0;
  int frames = 1;
  std::vector<DatasetEntry> pairs;
};

/// Writes {id}_src.vvf / {id}_tgt.vvf and manifest.json under `dir`.
Dataset gen_dataset(const DatasetOptions& options, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

std::string encode_vvf(const Video& video);
/// Throws FormatError naming the byte offset of the first bad field.
Video decode_vvf(const std::string& bytes);
/// Write-temp-then-rename.
void write_vvf(const std::filesystem::path& path, const Video& video);
Video read_vvf(const std::filesystem::path& path);
/// One frame as binary PPM, byte = round(255 * clamp(x, 0, 1)).
void write_ppm(const std::filesystem::path& path, const Video& video, int frame);
std::uint8_t ppm_byte(float value);

}  // namespace vifeedit
