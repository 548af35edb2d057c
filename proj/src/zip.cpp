#include "gaitworks/zip.hpp"

#include <algorithm>
#include <limits>

#include <zlib.h>

namespace gaitworks {
namespace {

constexpr std::uint32_t kLocalSig = 0x04034b50;
constexpr std::uint32_t kCentralSig = 0x02014b50;
constexpr std::uint32_t kEndSig = 0x06054b50;
constexpr std::uint16_t kDosDate = (0 << 9) | (1 << 5) | 1;  // 1980-01-01

struct Reader {
  std::span<const std::uint8_t> bytes;

  void need(std::size_t off, std::size_t n) const {
    if (off > bytes.size() || n > bytes.size() - off) throw ZipError("zip: truncated archive");
  }
  std::uint16_t u16(std::size_t off) const {
    need(off, 2);
    return static_cast<std::uint16_t>(bytes[off] | bytes[off + 1] << 8);
  }
  std::uint32_t u32(std::size_t off) const {
    need(off, 4);
    return static_cast<std::uint32_t>(bytes[off]) | static_cast<std::uint32_t>(bytes[off + 1]) << 8 |
           static_cast<std::uint32_t>(bytes[off + 2]) << 16 | static_cast<std::uint32_t>(bytes[off + 3]) << 24;
  }
};

std::vector<std::uint8_t> inflate_raw(std::span<const std::uint8_t> in, std::size_t expected) {
  std::vector<std::uint8_t> out(expected);
  z_stream zs{};
  if (inflateInit2(&zs, -MAX_WBITS) != Z_OK) throw ZipError("zip: inflateInit failed");
  zs.next_in = const_cast<Bytef*>(in.data());
  zs.avail_in = static_cast<uInt>(in.size());
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(out.size());
  const int rc = inflate(&zs, Z_FINISH);
  const auto produced = zs.total_out;
  inflateEnd(&zs);
  if (rc != Z_STREAM_END || produced != expected) throw ZipError("zip: corrupt deflate stream");
  return out;
}

std::vector<std::uint8_t> deflate_raw(std::span<const std::uint8_t> in) {
  z_stream zs{};
  if (deflateInit2(&zs, Z_DEFAULT_COMPRESSION, Z_DEFLATED, -MAX_WBITS, 8, Z_DEFAULT_STRATEGY) != Z_OK)
    throw ZipError("zip: deflateInit failed");
  std::vector<std::uint8_t> out(deflateBound(&zs, static_cast<uLong>(in.size())));
  zs.next_in = const_cast<Bytef*>(in.data());
  zs.avail_in = static_cast<uInt>(in.size());
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(out.size());
  const int rc = deflate(&zs, Z_FINISH);
  out.resize(zs.total_out);
  deflateEnd(&zs);
  if (rc != Z_STREAM_END) throw ZipError("zip: deflate failed");
  return out;
}

void put16(std::vector<std::uint8_t>& o, std::uint32_t v) {
  o.push_back(static_cast<std::uint8_t>(v & 0xFF));
  o.push_back(static_cast<std::uint8_t>((v >> 8) & 0xFF));
}
void put32(std::vector<std::uint8_t>& o, std::uint32_t v) {
  put16(o, v & 0xFFFF);
  put16(o, v >> 16);
}

}  // namespace

bool looks_like_zip(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) return false;
  const Reader r{bytes};
  const auto sig = r.u32(0);
  return sig == kLocalSig || sig == kEndSig;
}

std::vector<ZipEntry> read_zip(std::span<const std::uint8_t> archive, std::size_t max_total_bytes) {
  const Reader r{archive};
  if (archive.size() < 22) throw ZipError("zip: archive too small");
  // The end record sits in the last 22 + 65535 bytes (trailing comment).
  std::size_t end = std::numeric_limits<std::size_t>::max();
  const std::size_t lowest = archive.size() > 22 + 65535 ? archive.size() - 22 - 65535 : 0;
  for (std::size_t off = archive.size() - 22 + 1; off-- > lowest;)
    if (r.u32(off) == kEndSig) {
      end = off;
      break;
    }
  if (end == std::numeric_limits<std::size_t>::max()) throw ZipError("zip: end of central directory not found");
  if (r.u16(end + 4) != 0 || r.u16(end + 6) != 0) throw ZipError("zip: multi-disk archives are not supported");
  const std::size_t count = r.u16(end + 10);
  const std::uint32_t dir_offset = r.u32(end + 16);
  if (count == 0xFFFF || dir_offset == 0xFFFFFFFFu) throw ZipError("zip: ZIP64 archives are not supported");

  std::vector<ZipEntry> out;
  std::size_t total = 0;
  std::size_t off = dir_offset;
  for (std::size_t i = 0; i < count; ++i) {
    if (r.u32(off) != kCentralSig) throw ZipError("zip: bad central directory entry");
    const std::uint16_t flags = r.u16(off + 8);
    const std::uint16_t method = r.u16(off + 10);
    const std::uint32_t crc = r.u32(off + 16);
    const std::uint32_t csize = r.u32(off + 20);
    const std::uint32_t usize = r.u32(off + 24);
    const std::size_t name_len = r.u16(off + 28), extra_len = r.u16(off + 30), comment_len = r.u16(off + 32);
    const std::uint32_t local = r.u32(off + 42);
    r.need(off + 46, name_len);
    std::string name(reinterpret_cast<const char*>(archive.data() + off + 46), name_len);
    off += 46 + name_len + extra_len + comment_len;

    if (flags & 0x1) throw ZipError("zip: encrypted entry '" + name + "'");
    if (!name.empty() && name.back() == '/') continue;
    if (usize == 0xFFFFFFFFu || csize == 0xFFFFFFFFu) throw ZipError("zip: ZIP64 entry '" + name + "'");
    total += usize;
    if (total > max_total_bytes) throw ZipError("zip: archive expands beyond the size limit");

    if (r.u32(local) != kLocalSig) throw ZipError("zip: bad local header for '" + name + "'");
    const std::size_t data = local + 30 + r.u16(local + 26) + r.u16(local + 28);
    r.need(data, csize);
    const auto payload = archive.subspan(data, csize);
    ZipEntry e{std::move(name), {}};
    if (method == 0) {
      if (csize != usize) throw ZipError("zip: stored entry size mismatch");
      e.data.assign(payload.begin(), payload.end());
    } else if (method == 8) {
      e.data = inflate_raw(payload, usize);
    } else {
      throw ZipError("zip: unsupported compression method " + std::to_string(method) + " for '" + e.name + "'");
    }
    if (crc32(0L, e.data.data(), static_cast<uInt>(e.data.size())) != crc)
      throw ZipError("zip: CRC mismatch in '" + e.name + "'");
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<std::uint8_t> write_zip(const std::vector<ZipEntry>& entries, bool deflate) {
  std::vector<std::uint8_t> out, central;
  for (const auto& e : entries) {
    const auto crc = static_cast<std::uint32_t>(crc32(0L, e.data.data(), static_cast<uInt>(e.data.size())));
    std::vector<std::uint8_t> packed = deflate ? deflate_raw(e.data) : e.data;
    const bool use_deflate = deflate && packed.size() < e.data.size();
    if (!use_deflate) packed = e.data;
    const std::uint16_t method = use_deflate ? 8 : 0;
    const auto offset = static_cast<std::uint32_t>(out.size());

    put32(out, kLocalSig);
    put16(out, 20);
    put16(out, 0);
    put16(out, method);
    put16(out, 0);
    put16(out, kDosDate);
    put32(out, crc);
    put32(out, static_cast<std::uint32_t>(packed.size()));
    put32(out, static_cast<std::uint32_t>(e.data.size()));
    put16(out, static_cast<std::uint32_t>(e.name.size()));
    put16(out, 0);
    out.insert(out.end(), e.name.begin(), e.name.end());
    out.insert(out.end(), packed.begin(), packed.end());

    put32(central, kCentralSig);
    put16(central, 20);
    put16(central, 20);
    put16(central, 0);
    put16(central, method);
    put16(central, 0);
    put16(central, kDosDate);
    put32(central, crc);
    put32(central, static_cast<std::uint32_t>(packed.size()));
    put32(central, static_cast<std::uint32_t>(e.data.size()));
    put16(central, static_cast<std::uint32_t>(e.name.size()));
    put16(central, 0);
    put16(central, 0);
    put16(central, 0);
    put16(central, 0);
    put32(central, 0);
    put32(central, offset);
    central.insert(central.end(), e.name.begin(), e.name.end());
  }
  const auto dir_offset = static_cast<std::uint32_t>(out.size());
  out.insert(out.end(), central.begin(), central.end());
  put32(out, kEndSig);
  put16(out, 0);
  put16(out, 0);
  put16(out, static_cast<std::uint32_t>(entries.size()));
  put16(out, static_cast<std::uint32_t>(entries.size()));
  put32(out, static_cast<std::uint32_t>(central.size()));
  put32(out, dir_offset);
  put16(out, 0);
  return out;
}

}  // namespace gaitworks
