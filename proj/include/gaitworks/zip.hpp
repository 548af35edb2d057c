#pragma once

// Minimal ZIP container support (stored and deflate entries, no ZIP64, no encryption).

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace gaitworks {

class ZipError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ZipEntry {
  std::string name;
  std::vector<std::uint8_t> data;
};

/// Extracts every file entry (directories are skipped). CRCs are verified. Throws ZipError when
/// the archive is malformed, uses an unsupported feature, or expands beyond `max_total_bytes`.
std::vector<ZipEntry> read_zip(std::span<const std::uint8_t> archive, std::size_t max_total_bytes = 1ull << 30);

/// True when the bytes start with a local file header or an empty-archive end record.
bool looks_like_zip(std::span<const std::uint8_t> bytes);

/// Writes an archive with fixed timestamps, so equal inputs give equal bytes.
std::vector<std::uint8_t> write_zip(const std::vector<ZipEntry>& entries, bool deflate = true);

}  // namespace gaitworks
