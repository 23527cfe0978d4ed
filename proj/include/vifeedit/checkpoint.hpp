#pragma once

#include "vifeedit/autograd.hpp"

#include "json.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace vifeedit {

/// Layout (little-endian):
///   "VFCK" | u32 version | u32 meta_len | meta JSON | u32 count |
///   count x (u32 name_len | name | u32 rank | rank x u32 extent | u8 trainable | u8 role) |
///   f32 data of every entry in manifest order
struct CheckpointEntry {
  std::string name;
  Tensor<float> value;
  bool trainable = false;
  ParamRole role = ParamRole::base;
};

struct Checkpoint {
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry& find(const std::string& name) const;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string encode_checkpoint(const Checkpoint& ck);
/// Throws FormatError naming the offending byte offset.
Checkpoint decode_checkpoint(const std::string& bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Appends one entry per parameter.
void append_params(Checkpoint& ck, std::span<Param<float>* const> params);
/// Copies entry values into `params` by name, checking shape, trainable flag
/// and role.
void restore_params(const Checkpoint& ck, std::span<Param<float>* const> params);

}  // namespace vifeedit
