#include "textret/archive.hpp"

#include <bit>
#include <fstream>
#include <sstream>

#include "textret/errors.hpp"

namespace textret {

static_assert(std::endian::native == std::endian::little, "archives are stored little-endian");

namespace {
constexpr std::uint32_t kFormatVersion = 1;
}

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t seed) {
  const auto* b = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) seed = (seed ^ b[i]) * 1099511628211ULL;
  return seed;
}

void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void write_archive(const std::filesystem::path& path, std::string_view magic, const Archive& archive) {
  nlohmann::json header = archive.header;
  header["arrays"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, arr] : archive.arrays) {
    std::int64_t count = 1;
    for (int d : arr.shape) count *= d;
    if (count != arr.data.size()) throw InvalidInput("archive array " + name + " does not match its shape");
    header["arrays"].push_back({{"name", name}, {"shape", arr.shape}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(arr.data.size());
  }
  const std::string text = header.dump();
  std::ostringstream os(std::ios::binary);
  os.write(magic.data(), static_cast<std::streamsize>(magic.size()));
  const std::uint32_t version = kFormatVersion;
  const std::uint64_t len = text.size();
  os.write(reinterpret_cast<const char*>(&version), sizeof version);
  os.write(reinterpret_cast<const char*>(&len), sizeof len);
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [_, arr] : archive.arrays)
    os.write(reinterpret_cast<const char*>(arr.data.data()), static_cast<std::streamsize>(arr.data.size() * sizeof(double)));
  write_file_atomic(path, os.str());
}

Archive read_archive(const std::filesystem::path& path, std::string_view magic) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string got(magic.size(), '\0');
  in.read(got.data(), static_cast<std::streamsize>(got.size()));
  if (!in || got != magic) throw IoError(path.string() + ": not a " + std::string(magic) + " archive");
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || version != kFormatVersion) throw IoError(path.string() + ": unsupported archive version");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw IoError(path.string() + ": truncated header");
  Archive archive;
  try {
    archive.header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": corrupt header (" + e.what() + ")");
  }
  for (const auto& entry : archive.header.at("arrays")) {
    ArchiveArray arr;
    arr.shape = entry.at("shape").get<std::vector<int>>();
    std::int64_t count = 1;
    for (int d : arr.shape) count *= d;
    arr.data.resize(count);
    in.read(reinterpret_cast<char*>(arr.data.data()), static_cast<std::streamsize>(count * sizeof(double)));
    if (!in) throw IoError(path.string() + ": truncated payload");
    archive.arrays.emplace(entry.at("name").get<std::string>(), std::move(arr));
  }
  archive.header.erase("arrays");
  return archive;
}

}  // namespace textret
