#pragma once

// Little-endian framing shared by the checkpoint, volume and annotation files:
// 4-byte magic | u64 header length | JSON header | raw payload.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "embolite/errors.hpp"
#include "json.hpp"

namespace embolite::binio {

static_assert(std::endian::native == std::endian::little, "big-endian hosts are not supported");

inline void write_file(const std::filesystem::path& path, const char magic[4], const nlohmann::json& header,
                       const void* payload, std::size_t payload_bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open for writing: " + path.string());
  const std::string h = header.dump();
  const std::uint64_t len = h.size();
  out.write(magic, 4);
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  out.write(static_cast<const char*>(payload), static_cast<std::streamsize>(payload_bytes));
  if (!out) throw DataError("write failed: " + path.string());
}

struct Framed {
  nlohmann::json header;
  std::vector<char> payload;
  std::size_t payload_offset = 0;
};

inline std::vector<char> read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open: " + path.string());
  return std::vector<char>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

inline Framed read_file(const std::filesystem::path& path, const char magic[4]) {
  const std::vector<char> bytes = read_all(path);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), magic, 4) != 0) {
    throw ParseError(path.string() + ": bad magic, expected \"" + std::string(magic, 4) + "\"", 0);
  }
  if (bytes.size() < 12) throw ParseError(path.string() + ": truncated header length", 4);
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + 4, sizeof(len));
  if (len > bytes.size() - 12) throw ParseError(path.string() + ": header length exceeds file size", 4);
  Framed f;
  try {
    f.header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + static_cast<std::ptrdiff_t>(len));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": malformed JSON header: " + e.what(), 12);
  }
  f.payload_offset = 12 + static_cast<std::size_t>(len);
  f.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(f.payload_offset), bytes.end());
  return f;
}

// Product of dims with overflow and sign checks.
inline std::size_t checked_count(const std::vector<std::int64_t>& dims, const std::string& where,
                                 std::size_t offset) {
  std::size_t n = 1;
  for (std::int64_t d : dims) {
    if (d <= 0) throw ParseError(where + ": non-positive dimension", offset);
    if (n > (std::size_t{1} << 40) / static_cast<std::size_t>(d)) throw ParseError(where + ": dimension overflow", offset);
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

}  // namespace embolite::binio
