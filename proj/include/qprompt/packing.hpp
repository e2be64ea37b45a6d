#pragma once

// Packed storage of a quantized tensor.
//
// Blob layout (all integers little-endian):
//
//   offset  size        field
//   0       4           magic "QPRM"
//   4       1           format version (1)
//   5       1           bits b in {1, 2, 4, 8}
//   6       8           element count N (uint64)
//   14      4           mu (IEEE-754 binary32)
//   18      4           sigma (IEEE-754 binary32)
//   22      2 * 2^b     codebook centers (IEEE-754 binary16, ascending)
//   ...     ceil(N*b/8) packed indices
//
// Index j occupies bits [j*b, (j+1)*b) of the payload, counting from the
// least significant bit of byte 0. Unused high bits of the last byte are 0.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

#include "qprompt/error.hpp"
#include "qprompt/half.hpp"
#include "qprompt/quantizer.hpp"

namespace qprompt {

inline constexpr std::array<std::uint8_t, 4> kBlobMagic = {'Q', 'P', 'R', 'M'};
inline constexpr std::uint8_t kBlobVersion = 1;
inline constexpr std::size_t kBlobHeaderBytes = 22;

inline std::size_t payload_bytes(std::uint64_t n, int bits) {
  return static_cast<std::size_t>((n * static_cast<std::uint64_t>(bits) + 7) / 8);
}

/// Bits needed for b-bit indices plus a 2^b-entry fp16 codebook: b*N + 2^b*16.
/// The fixed header is not included.
constexpr std::uint64_t storage_bits(std::uint64_t n, int bits) {
  return static_cast<std::uint64_t>(bits) * n + (std::uint64_t{1} << bits) * 16;
}

/// Bits for the same tensor kept as plain fp16.
constexpr std::uint64_t fp16_storage_bits(std::uint64_t n) { return 16 * n; }

inline std::vector<std::uint8_t> pack(std::span<const Index> indices, int bits) {
  require_supported_bits(bits);
  const Index limit = static_cast<Index>(codebook_size(bits));
  std::vector<std::uint8_t> out(payload_bytes(indices.size(), bits), 0);
  std::size_t bit = 0;
  for (Index v : indices) {
    if (v >= limit) {
      fail(ErrorCode::IndexOverflow,
           "index " + std::to_string(v) + " does not fit in " + std::to_string(bits) + " bits");
    }
    // b divides 8, so an index never straddles a byte boundary.
    out[bit >> 3] |= static_cast<std::uint8_t>(v << (bit & 7));
    bit += static_cast<std::size_t>(bits);
  }
  return out;
}

inline std::vector<Index> unpack(std::span<const std::uint8_t> payload, std::uint64_t n, int bits) {
  require_supported_bits(bits);
  if (payload.size() != payload_bytes(n, bits)) {
    fail(ErrorCode::LengthMismatch, "payload holds " + std::to_string(payload.size()) +
                                        " bytes, expected " + std::to_string(payload_bytes(n, bits)));
  }
  const unsigned mask = (1u << bits) - 1u;
  std::vector<Index> out(static_cast<std::size_t>(n));
  std::size_t bit = 0;
  for (auto& v : out) {
    v = (payload[bit >> 3] >> (bit & 7)) & mask;
    bit += static_cast<std::size_t>(bits);
  }
  return out;
}

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    if (data_.size() - pos_ < n) {
      fail(ErrorCode::Truncated, std::string("blob ends inside ") + what);
    }
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint8_t u8(const char* what) { return take(1, what)[0]; }
  std::uint64_t uint_le(std::size_t n, const char* what) {
    const auto b = take(n, what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  }
  float f32(const char* what) {
    return std::bit_cast<float>(static_cast<std::uint32_t>(uint_le(4, what)));
  }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

struct BlobHeader {
  std::uint8_t version = kBlobVersion;
  int bits = 1;
  std::uint64_t count = 0;
  float mu = 0.0f;
  float sigma = 0.0f;
};

/// Decoded blob. Centers carry half precision; mu and sigma single precision.
struct QuantizedBlob {
  BlobHeader header;
  Codebook codebook;
  std::vector<Index> indices;
};

inline std::vector<std::uint8_t> serialize(const Codebook& cb, std::span<const Index> indices) {
  validate(cb);
  detail::ByteWriter w;
  for (auto m : kBlobMagic) w.u8(m);
  w.u8(kBlobVersion);
  w.u8(static_cast<std::uint8_t>(cb.bits));
  w.u64(indices.size());
  w.f32(static_cast<float>(cb.stats.mu));
  w.f32(static_cast<float>(cb.stats.sigma));
  for (double c : cb.centers) w.u16(double_to_half(c));
  w.bytes(pack(indices, cb.bits));
  return w.take();
}

/// Parses the fixed header only.
inline BlobHeader read_header(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  const auto magic = r.take(4, "magic");
  if (!std::equal(magic.begin(), magic.end(), kBlobMagic.begin())) {
    fail(ErrorCode::BadMagic, "not a QPRM blob");
  }
  BlobHeader h;
  h.version = r.u8("version");
  if (h.version != kBlobVersion) {
    fail(ErrorCode::UnsupportedVersion, "blob version " + std::to_string(h.version) + " is not supported");
  }
  h.bits = r.u8("bit width");
  if (!is_supported_bits(h.bits)) {
    fail(ErrorCode::BadConfig, "blob declares unsupported bit width " + std::to_string(h.bits));
  }
  h.count = r.uint_le(8, "element count");
  h.mu = r.f32("mu");
  h.sigma = r.f32("sigma");
  return h;
}

inline QuantizedBlob deserialize(std::span<const std::uint8_t> bytes) {
  QuantizedBlob blob;
  blob.header = read_header(bytes);
  detail::ByteReader r(bytes.subspan(kBlobHeaderBytes));
  const int bits = blob.header.bits;
  blob.codebook.bits = bits;
  blob.codebook.stats = {blob.header.mu, blob.header.sigma};
  blob.codebook.centers.resize(codebook_size(bits));
  for (double& c : blob.codebook.centers) {
    c = half_to_float(static_cast<std::uint16_t>(r.uint_le(2, "codebook")));
  }
  // Guard the size computation before trusting a huge count.
  if (blob.header.count > (std::uint64_t{1} << 60)) fail(ErrorCode::Truncated, "element count exceeds blob size");
  const std::size_t payload = payload_bytes(blob.header.count, bits);
  if (r.remaining() < payload) fail(ErrorCode::Truncated, "blob ends inside payload");
  if (r.remaining() > payload) fail(ErrorCode::LengthMismatch, "trailing bytes after payload");
  blob.indices = unpack(r.take(payload, "payload"), blob.header.count, bits);
  return blob;
}

}  // namespace qprompt
