#pragma once

// Little-endian primitives shared by every on-disk format in the library.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <iterator>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dualcp/error.hpp"

namespace dualcp::io {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

inline void put_u8(std::ostream& out, std::uint8_t v) { out.put(static_cast<char>(v)); }

inline void put_f32(std::ostream& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

inline void put_f64(std::ostream& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

inline void put_bytes(std::ostream& out, std::string_view s) {
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

/// Bounds-checked cursor over an in-memory byte buffer. Running off the end
/// raises Truncated, which is how every loader distinguishes short files.
class Reader {
 public:
  explicit Reader(std::span<const unsigned char> bytes) : bytes_(bytes) {}

  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }
  std::size_t position() const noexcept { return pos_; }

  std::span<const unsigned char> take(std::size_t n) {
    require(n <= remaining(), ErrorCode::Truncated,
            "need " + std::to_string(n) + " bytes at offset " + std::to_string(pos_) + ", have " +
                std::to_string(remaining()));
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  std::uint8_t u8() { return take(1)[0]; }

  std::uint32_t u32() {
    auto b = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
  }

  std::uint64_t u64() {
    auto b = take(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  }

  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }

  std::string string(std::size_t n) {
    auto b = take(n);
    return std::string(reinterpret_cast<const char*>(b.data()), b.size());
  }

 private:
  std::span<const unsigned char> bytes_;
  std::size_t pos_ = 0;
};

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::Io, "cannot open " + path);
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorCode::Io, "cannot open " + path + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), ErrorCode::Io, "write failed for " + path);
}


/// f64 matrix block: u32 rows, u32 cols, rows*cols f64 row-major.
inline void put_matrix(std::ostream& out, const Eigen::MatrixXd& m) {
  put_u32(out, static_cast<std::uint32_t>(m.rows()));
  put_u32(out, static_cast<std::uint32_t>(m.cols()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) put_f64(out, m(r, c));
}

inline Eigen::MatrixXd get_matrix(Reader& in) {
  const auto rows = in.u32();
  const auto cols = in.u32();
  require(static_cast<std::uint64_t>(rows) * cols * 8 <= in.remaining(), ErrorCode::Truncated,
          "matrix block " + std::to_string(rows) + "x" + std::to_string(cols) + " exceeds payload");
  Eigen::MatrixXd m(rows, cols);
  for (std::uint32_t r = 0; r < rows; ++r)
    for (std::uint32_t c = 0; c < cols; ++c) m(r, c) = in.f64();
  return m;
}

}  // namespace dualcp::io
