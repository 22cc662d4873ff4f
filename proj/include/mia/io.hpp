#pragma once

// Binary tensor files (.ten) and the little-endian helpers shared with checkpoints.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

#include "mia/tensor.hpp"

namespace mia {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace le {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  std::array<char, 4> b{};
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  os.write(b.data(), 4);
}

inline void put_f32(std::ostream& os, float f) { put_u32(os, std::bit_cast<std::uint32_t>(f)); }

inline bool get_u32(std::istream& is, std::uint32_t& v) {
  std::array<unsigned char, 4> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), 4)) return false;
  v = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
      (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  return true;
}

inline bool get_f32(std::istream& is, float& f) {
  std::uint32_t u = 0;
  if (!get_u32(is, u)) return false;
  f = std::bit_cast<float>(u);
  return true;
}

/// ndim, dims, then f32 payload.
inline void put_tensor_body(std::ostream& os, const Tensor& t) {
  put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) put_u32(os, static_cast<std::uint32_t>(d));
  for (double v : t.values()) put_f32(os, static_cast<float>(v));
}

inline Shape get_shape(std::istream& is, const std::string& what) {
  std::uint32_t ndim = 0;
  if (!get_u32(is, ndim)) throw FormatError(what + ": truncated header (ndim)");
  if (ndim == 0 || ndim > 8) throw FormatError(what + ": unsupported ndim " + std::to_string(ndim));
  Shape shape(ndim);
  for (auto& d : shape) {
    std::uint32_t v = 0;
    if (!get_u32(is, v)) throw FormatError(what + ": truncated header (dims)");
    if (v == 0) throw FormatError(what + ": zero extent");
    d = v;
  }
  return shape;
}

inline Tensor get_payload(std::istream& is, Shape shape, const std::string& what) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) {
    float f = 0;
    if (!get_f32(is, f)) throw FormatError(what + ": truncated payload");
    v = f;
  }
  return t;
}

}  // namespace le

inline constexpr char kTensorMagic[4] = {'M', 'I', 'A', 'T'};
inline constexpr std::uint32_t kTensorVersion = 1;

inline void write_tensor(std::ostream& os, const Tensor& t) {
  os.write(kTensorMagic, 4);
  le::put_u32(os, kTensorVersion);
  le::put_tensor_body(os, t);
}

inline void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
  write_tensor(os, t);
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

/// Reads and validates a .ten header; leaves the stream at the payload.
inline Shape read_tensor_header(std::istream& is, const std::string& what) {
  char magic[4] = {};
  if (!is.read(magic, 4) || std::memcmp(magic, kTensorMagic, 4) != 0) {
    throw FormatError(what + ": bad magic (expected MIAT)");
  }
  std::uint32_t version = 0;
  if (!le::get_u32(is, version)) throw FormatError(what + ": truncated header (version)");
  if (version != kTensorVersion) throw FormatError(what + ": unsupported version " + std::to_string(version));
  return le::get_shape(is, what);
}

inline Tensor read_tensor(std::istream& is, const std::string& what = "tensor") {
  Shape shape = read_tensor_header(is, what);
  return le::get_payload(is, std::move(shape), what);
}

inline Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path.string());
  return read_tensor(is, path.string());
}

inline Shape peek_tensor_shape(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path.string());
  return read_tensor_header(is, path.string());
}

}  // namespace mia
