#pragma once

// Versioned binary archive: magic string, JSON header, named float64 arrays.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"

namespace textret {

struct ArchiveArray {
  std::vector<int> shape;
  Eigen::VectorXd data;
};

struct Archive {
  nlohmann::json header;
  std::map<std::string, ArchiveArray> arrays;
};

/// Writes to a temporary sibling and renames it into place.
void write_archive(const std::filesystem::path& path, std::string_view magic, const Archive& archive);
/// Throws IoError on a missing file, wrong magic, or truncated payload.
Archive read_archive(const std::filesystem::path& path, std::string_view magic);

/// FNV-1a over raw bytes, chainable through `seed`.
std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t seed = 14695981039346656037ULL);

/// Atomically replaces `path` with `contents`.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

}  // namespace textret
