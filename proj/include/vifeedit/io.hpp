#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

namespace vifeedit {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Writes `bytes` to a temporary sibling and renames it over `path`.
void atomic_write(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace vifeedit
