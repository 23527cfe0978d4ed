#include "vifeedit/checkpoint.hpp"

#include "vifeedit/io.hpp"

#include <cstring>

namespace vifeedit {

namespace {

void put_u32(std::string& out, std::uint32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); }

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  const char* take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw FormatError("checkpoint truncated at byte offset " + std::to_string(bytes_.size()) +
                        " while reading " + what + " at offset " + std::to_string(pos_));
    }
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint32_t u32(const char* what) {
    std::uint32_t v;
    std::memcpy(&v, take(4, what), 4);
    return v;
  }
  std::uint8_t u8(const char* what) { return static_cast<std::uint8_t>(*take(1, what)); }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

const CheckpointEntry& Checkpoint::find(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return e;
  }
  throw std::out_of_range("checkpoint has no entry '" + name + "'");
}

std::string encode_checkpoint(const Checkpoint& ck) {
  std::string out = "VFCK";
  put_u32(out, kCheckpointVersion);
  const std::string meta = ck.metadata.dump();
  put_u32(out, static_cast<std::uint32_t>(meta.size()));
  out += meta;
  put_u32(out, static_cast<std::uint32_t>(ck.entries.size()));
  for (const auto& e : ck.entries) {
    put_u32(out, static_cast<std::uint32_t>(e.name.size()));
    out += e.name;
    put_u32(out, static_cast<std::uint32_t>(e.value.rank()));
    for (Index d : e.value.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    out.push_back(static_cast<char>(e.trainable ? 1 : 0));
    out.push_back(static_cast<char>(e.role));
  }
  for (const auto& e : ck.entries) {
    out.append(reinterpret_cast<const char*>(e.value.ptr()), static_cast<std::size_t>(e.value.size()) * 4);
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  if (std::memcmp(r.take(4, "magic"), "VFCK", 4) != 0) throw FormatError("checkpoint bad magic at byte offset 0");
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint unsupported version " + std::to_string(version) + " at byte offset 4");
  }
  Checkpoint ck;
  const std::uint32_t meta_len = r.u32("metadata length");
  const std::size_t meta_at = r.pos();
  const char* meta = r.take(meta_len, "metadata");
  try {
    ck.metadata = nlohmann::json::parse(meta, meta + meta_len);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint metadata at byte offset " + std::to_string(meta_at) + " is not JSON: " + e.what());
  }
  const std::uint32_t count = r.u32("entry count");
  std::vector<Shape> shapes;
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const std::uint32_t len = r.u32("name length");
    e.name.assign(r.take(len, "name"), len);
    const std::size_t rank_at = r.pos();
    const std::uint32_t rank = r.u32("rank");
    if (rank == 0 || rank > 8) {
      throw FormatError("checkpoint entry '" + e.name + "' has rank " + std::to_string(rank) +
                        " at byte offset " + std::to_string(rank_at));
    }
    Shape shape;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const std::size_t at = r.pos();
      const std::uint32_t d = r.u32("extent");
      if (d == 0) throw FormatError("checkpoint zero extent at byte offset " + std::to_string(at));
      shape.push_back(d);
    }
    e.trainable = r.u8("trainable flag") != 0;
    const std::size_t role_at = r.pos();
    const std::uint8_t role = r.u8("role");
    if (role > static_cast<std::uint8_t>(ParamRole::moment)) {
      throw FormatError("checkpoint unknown role " + std::to_string(role) + " at byte offset " + std::to_string(role_at));
    }
    e.role = static_cast<ParamRole>(role);
    shapes.push_back(std::move(shape));
    ck.entries.push_back(std::move(e));
  }
  for (std::size_t i = 0; i < ck.entries.size(); ++i) {
    Tensor<float> t(shapes[i]);
    std::memcpy(t.ptr(), r.take(static_cast<std::size_t>(t.size()) * 4, "tensor data"),
                static_cast<std::size_t>(t.size()) * 4);
    ck.entries[i].value = std::move(t);
  }
  if (r.remaining() != 0) throw FormatError("checkpoint trailing data at byte offset " + std::to_string(r.pos()));
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  atomic_write(path, encode_checkpoint(ck));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  try {
    return decode_checkpoint(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void append_params(Checkpoint& ck, std::span<Param<float>* const> params) {
  for (const auto* p : params) ck.entries.push_back({p->name, p->value, p->trainable, p->role});
}

void restore_params(const Checkpoint& ck, std::span<Param<float>* const> params) {
  for (auto* p : params) {
    const auto& e = ck.find(p->name);
    if (e.value.shape() != p->value.shape()) {
      throw ShapeError("checkpoint entry '" + p->name + "' has shape " + shape_string(e.value.shape()) +
                       ", model expects " + shape_string(p->value.shape()));
    }
    if (e.role != p->role) throw std::runtime_error("checkpoint entry '" + p->name + "' has a different role");
    p->value = e.value;
    p->trainable = e.trainable;
    p->zero_grad();
  }
}

}  // namespace vifeedit
