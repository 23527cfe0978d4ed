#include "vifeedit/synth.hpp"

#include "json.hpp"

#include <bit>
#include <cmath>
#include <random>

namespace vifeedit {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "VVF I/O assumes a little-endian host");

namespace {

double reflect(double start, double velocity, int frame, double lo, double hi) {
  const double span = hi - lo;
  if (span <= 0.0) return lo;
  double p = std::fmod(start - lo + velocity * frame, 2.0 * span);
  if (p < 0.0) p += 2.0 * span;
  if (p > span) p = 2.0 * span - p;
  return lo + p;
}

bool covers(const ShapeSpec& s, double cx, double cy, double px, double py) {
  const double r = s.size / 2.0;
  switch (s.kind) {
    case ShapeKind::circle:
      return (px - cx) * (px - cx) + (py - cy) * (py - cy) <= r * r;
    case ShapeKind::square:
      return std::abs(px - cx) <= r && std::abs(py - cy) <= r;
    case ShapeKind::triangle: {
      const double top = cy - r;
      return py >= top && py <= cy + r && std::abs(px - cx) <= (py - top) / 2.0;
    }
  }
  return false;
}

void check_shape_index(const SceneSpec& spec, int index, const char* task) {
  if (index < 0 || index >= static_cast<int>(spec.shapes.size())) {
    throw std::out_of_range(std::string(task) + ": shape index " + std::to_string(index) +
                            " outside scene with " + std::to_string(spec.shapes.size()) + " shapes");
  }
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

std::uint32_t get_u32(const std::string& bytes, std::size_t offset, const char* field) {
  if (bytes.size() < offset + 4) {
    throw FormatError("VVF truncated at byte offset " + std::to_string(bytes.size()) + " while reading " +
                      field + " at offset " + std::to_string(offset));
  }
  std::uint32_t v;
  std::memcpy(&v, bytes.data() + offset, 4);
  return v;
}

constexpr std::uint32_t kVvfVersion = 1;
constexpr std::size_t kVvfHeader = 24;

}  // namespace

std::array<double, 2> shape_centre(const SceneSpec& spec, const ShapeSpec& s, int frame) {
  const double r = s.size / 2.0;
  return {reflect(s.x, s.vx, frame, r, spec.width - r), reflect(s.y, s.vy, frame, r, spec.height - r)};
}

Video render_video(const SceneSpec& spec) {
  if (spec.frames < 1 || spec.height < 1 || spec.width < 1) {
    throw std::invalid_argument("scene needs frames, height and width >= 1");
  }
  for (std::size_t i = 0; i < spec.shapes.size(); ++i) {
    const auto& s = spec.shapes[i];
    const double r = s.size / 2.0;
    if (s.size <= 0.0 || s.x - r < 0.0 || s.x + r > spec.width || s.y - r < 0.0 ||
        s.y + r > spec.height) {
      throw std::invalid_argument("shape " + std::to_string(i) + " (size " + std::to_string(s.size) +
                                  " at " + std::to_string(s.x) + "," + std::to_string(s.y) +
                                  ") is not inside the " + std::to_string(spec.width) + "x" +
                                  std::to_string(spec.height) + " canvas");
    }
  }
  const Index H = spec.height, W = spec.width;
  Video v({spec.frames, H, W, 3});
  float* px = v.ptr();
  for (int f = 0; f < spec.frames; ++f) {
    std::vector<std::array<double, 2>> centres;
    for (const auto& s : spec.shapes) centres.push_back(shape_centre(spec, s, f));
    for (Index y = 0; y < H; ++y) {
      for (Index x = 0; x < W; ++x, px += 3) {
        Color c = spec.background;
        for (std::size_t i = 0; i < spec.shapes.size(); ++i) {
          if (covers(spec.shapes[i], centres[i][0], centres[i][1], x + 0.5, y + 0.5)) {
            c = spec.shapes[i].color;
          }
        }
        std::copy(c.begin(), c.end(), px);
      }
    }
  }
  return v;
}

std::vector<std::string> task_names() {
  return {"channel-permute", "color-affine", "shape-remove", "shape-add",
          "shape-swap",      "shape-recolor", "edge-condition"};
}

std::string task_name(const EditTask& task) { return task_names()[task.index()]; }

EditTask task_from_name(const std::string& name) {
  const auto names = task_names();
  const EditTask defaults[] = {ChannelPermute{}, ColorAffine{}, ShapeRemove{}, ShapeAdd{},
                               ShapeSwap{},      ShapeRecolor{}, EdgeCondition{}};
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == name) return defaults[i];
  }
  std::string list;
  for (const auto& n : names) list += (list.empty() ? "" : ", ") + n;
  throw std::invalid_argument("unknown task '" + name + "'; valid tasks: " + list);
}

Video apply_color_map(const Video& video, const EditTask& task) {
  Video out = video;
  const Index pixels = video.size() / 3;
  float* o = out.ptr();
  const float* in = video.ptr();
  if (const auto* p = std::get_if<ChannelPermute>(&task)) {
    for (Index i = 0; i < pixels; ++i) {
      for (int c = 0; c < 3; ++c) o[3 * i + c] = in[3 * i + p->perm[c]];
    }
  } else if (const auto* a = std::get_if<ColorAffine>(&task)) {
    for (Index i = 0; i < pixels; ++i) {
      for (int r = 0; r < 3; ++r) {
        float acc = a->bias[r];
        for (int c = 0; c < 3; ++c) acc += a->matrix[3 * r + c] * in[3 * i + c];
        o[3 * i + r] = std::clamp(acc, 0.0f, 1.0f);
      }
    }
  } else {
    throw std::invalid_argument(task_name(task) + " is not a pointwise color task");
  }
  return out;
}

Video edge_map(const Video& video) {
  const Index f = video.dim(0), H = video.dim(1), W = video.dim(2), C = video.dim(3);
  Video out(video.shape());
  auto differs = [&](Index t, Index y0, Index x0, Index y1, Index x1) {
    const float* a = video.ptr() + ((t * H + y0) * W + x0) * C;
    const float* b = video.ptr() + ((t * H + y1) * W + x1) * C;
    return !std::equal(a, a + C, b);
  };
  for (Index t = 0; t < f; ++t) {
    for (Index y = 0; y < H; ++y) {
      for (Index x = 0; x < W; ++x) {
        const bool edge = (y > 0 && differs(t, y, x, y - 1, x)) ||
                          (y + 1 < H && differs(t, y, x, y + 1, x)) ||
                          (x > 0 && differs(t, y, x, y, x - 1)) ||
                          (x + 1 < W && differs(t, y, x, y, x + 1));
        if (edge) std::fill_n(out.ptr() + ((t * H + y) * W + x) * C, C, 1.0f);
      }
    }
  }
  return out;
}

VideoPair apply_edit_oracle(const SceneSpec& spec, const EditTask& task) {
  VideoPair pair;
  pair.source = render_video(spec);
  SceneSpec edited = spec;
  switch (task.index()) {
    case 0:
    case 1:
      pair.target = apply_color_map(pair.source, task);
      return pair;
    case 2: {
      const int i = std::get<ShapeRemove>(task).index;
      check_shape_index(spec, i, "shape-remove");
      edited.shapes.erase(edited.shapes.begin() + i);
      break;
    }
    case 3:
      edited.shapes.push_back(std::get<ShapeAdd>(task).shape);
      break;
    case 4: {
      const auto& s = std::get<ShapeSwap>(task);
      check_shape_index(spec, s.index, "shape-swap");
      edited.shapes[static_cast<std::size_t>(s.index)].kind = s.kind;
      break;
    }
    case 5: {
      const auto& s = std::get<ShapeRecolor>(task);
      check_shape_index(spec, s.index, "shape-recolor");
      edited.shapes[static_cast<std::size_t>(s.index)].color = s.color;
      break;
    }
    case 6:
      pair.target = pair.source;
      pair.source = edge_map(pair.target);
      return pair;
  }
  pair.target = render_video(edited);
  return pair;
}

std::uint64_t scene_seed(std::uint64_t seed, std::uint64_t index, SeedDomain domain) {
  return (splitmix64(splitmix64(seed) ^ index) << 1) | static_cast<std::uint64_t>(domain);
}

SceneSpec random_scene(const EditTask& task, std::uint64_t seed, int frames, int height, int width) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  SceneSpec spec;
  spec.height = height;
  spec.width = width;
  spec.frames = frames;
  spec.seed = seed;
  for (auto& c : spec.background) c = static_cast<float>(unit(rng));
  const bool shape_task = task.index() >= 2 && task.index() <= 5;
  const int count = 1 + static_cast<int>(rng() % 3);
  for (int i = 0; i < count; ++i) {
    ShapeSpec s;
    if (shape_task) {
      s.kind = i == 0 ? ShapeKind::circle : (rng() % 2 ? ShapeKind::square : ShapeKind::triangle);
    } else {
      s.kind = static_cast<ShapeKind>(rng() % 3);
    }
    s.size = 6.0 + 6.0 * unit(rng);
    const double r = s.size / 2.0;
    s.x = r + (width - 2.0 * r) * unit(rng);
    s.y = r + (height - 2.0 * r) * unit(rng);
    auto speed = [&] { return (1.0 + unit(rng)) * (rng() % 2 ? 1.0 : -1.0); };
    s.vx = speed();
    s.vy = speed();
    double contrast = 0.0;
    while (contrast < 0.6) {
      for (auto& c : s.color) c = static_cast<float>(unit(rng));
      contrast = 0.0;
      for (int c = 0; c < 3; ++c) contrast += std::abs(s.color[c] - spec.background[c]);
    }
    spec.shapes.push_back(s);
  }
  return spec;
}

Dataset gen_dataset(const DatasetOptions& options, const fs::path& dir) {
  if (options.pairs_per_task < 1) throw std::invalid_argument("dataset needs at least one pair");
  if (options.tasks.empty()) throw std::invalid_argument("dataset needs at least one task");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create dataset directory " + dir.string() + ": " + ec.message());
  Dataset ds;
  ds.root = dir;
  ds.seed = options.seed;
  ds.frames = options.frames;
  json pairs = json::array();
  json tasks = json::array();
  std::uint64_t index = 0;
  for (const auto& task : options.tasks) {
    tasks.push_back(task_name(task));
    for (int i = 0; i < options.pairs_per_task; ++i, ++index) {
      const SceneSpec spec = random_scene(task, scene_seed(options.seed, index, options.domain),
                                          options.frames, options.height, options.width);
      const VideoPair vp = apply_edit_oracle(spec, task);
      char id[16];
      std::snprintf(id, sizeof(id), "%05llu", static_cast<unsigned long long>(index));
      DatasetEntry e{id, task_id(task), std::string(id) + "_src.vvf", std::string(id) + "_tgt.vvf"};
      write_vvf(dir / e.source, vp.source);
      write_vvf(dir / e.target, vp.target);
      pairs.push_back({{"id", e.id}, {"task_id", e.task_id}, {"src", e.source.string()},
                       {"tgt", e.target.string()}, {"scene_seed", spec.seed}});
      e.source = dir / e.source;
      e.target = dir / e.target;
      ds.pairs.push_back(std::move(e));
    }
  }
  const json manifest = {{"pairs", pairs},
                         {"seed", options.seed},
                         {"task", tasks},
                         {"frames", options.frames},
                         {"canvas", {options.height, options.width}},
                         {"split", options.domain == SeedDomain::train ? "train" : "eval"}};
  atomic_write(dir / "manifest.json", manifest.dump(2) + "\n");
  return ds;
}

Dataset load_dataset(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json";
  json m;
  try {
    m = json::parse(read_file(mpath));
  } catch (const json::exception& e) {
    throw std::runtime_error("bad manifest " + mpath.string() + ": " + e.what());
  }
  Dataset ds;
  ds.root = dir;
  ds.seed = m.at("seed").get<std::uint64_t>();
  ds.frames = m.at("frames").get<int>();
  for (const auto& p : m.at("pairs")) {
    ds.pairs.push_back({p.at("id").get<std::string>(), p.at("task_id").get<int>(),
                        dir / p.at("src").get<std::string>(), dir / p.at("tgt").get<std::string>()});
  }
  if (ds.pairs.empty()) throw std::runtime_error("dataset " + dir.string() + " has no pairs");
  return ds;
}

std::string encode_vvf(const Video& video) {
  if (video.rank() != 4) throw ShapeError("VVF needs [f, h, w, c], got " + shape_string(video.shape()));
  std::string out = "VIFE";
  put<std::uint32_t>(out, kVvfVersion);
  for (int i = 0; i < 4; ++i) put<std::uint32_t>(out, static_cast<std::uint32_t>(video.dim(i)));
  out.append(reinterpret_cast<const char*>(video.ptr()), static_cast<std::size_t>(video.size()) * 4);
  return out;
}

Video decode_vvf(const std::string& bytes) {
  if (bytes.size() < 4) {
    throw FormatError("VVF truncated at byte offset " + std::to_string(bytes.size()) + " while reading magic");
  }
  if (bytes.compare(0, 4, "VIFE") != 0) throw FormatError("VVF bad magic at byte offset 0");
  const std::uint32_t version = get_u32(bytes, 4, "version");
  if (version != kVvfVersion) {
    throw FormatError("VVF unsupported version " + std::to_string(version) + " at byte offset 4");
  }
  Shape shape;
  const char* names[4] = {"frames", "height", "width", "channels"};
  for (int i = 0; i < 4; ++i) {
    const std::size_t off = 8 + 4 * static_cast<std::size_t>(i);
    const std::uint32_t v = get_u32(bytes, off, names[i]);
    if (v == 0) throw FormatError(std::string("VVF zero ") + names[i] + " at byte offset " + std::to_string(off));
    shape.push_back(v);
  }
  const std::size_t expected = kVvfHeader + static_cast<std::size_t>(shape_numel(shape)) * 4;
  if (bytes.size() < expected) {
    throw FormatError("VVF truncated at byte offset " + std::to_string(bytes.size()) + ", expected " +
                      std::to_string(expected) + " bytes");
  }
  if (bytes.size() > expected) {
    throw FormatError("VVF trailing data at byte offset " + std::to_string(expected));
  }
  Video v(shape);
  std::memcpy(v.ptr(), bytes.data() + kVvfHeader, expected - kVvfHeader);
  return v;
}

void write_vvf(const fs::path& path, const Video& video) { atomic_write(path, encode_vvf(video)); }

Video read_vvf(const fs::path& path) {
  try {
    return decode_vvf(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::uint8_t ppm_byte(float value) {
  const double c = std::clamp(static_cast<double>(value), 0.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(255.0 * c));
}

void write_ppm(const fs::path& path, const Video& video, int frame) {
  if (video.rank() != 4 || video.dim(3) != 3) {
    throw ShapeError("PPM export needs an RGB video, got " + shape_string(video.shape()));
  }
  if (frame < 0 || frame >= video.dim(0)) throw std::out_of_range("frame " + std::to_string(frame) + " out of range");
  const Index H = video.dim(1), W = video.dim(2);
  std::string out = "P6\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
  const float* px = video.ptr() + frame * H * W * 3;
  for (Index i = 0; i < H * W * 3; ++i) out.push_back(static_cast<char>(ppm_byte(px[i])));
  atomic_write(path, out);
}

}  // namespace vifeedit
