#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "mlosr/error.hpp"
#include "mlosr/tensor.hpp"

// Little-endian primitives for the checkpoint and dataset cache containers.
namespace mlosr::binary {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  std::array<char, 4> b{};
  for (int i = 0; i < 4; ++i) b[static_cast<std::size_t>(i)] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  os.write(b.data(), 4);
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
  std::array<char, 8> b{};
  for (int i = 0; i < 8; ++i) b[static_cast<std::size_t>(i)] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  os.write(b.data(), 8);
}

inline void write_f64(std::ostream& os, double v) { write_u64(os, std::bit_cast<std::uint64_t>(v)); }

inline void write_string(std::ostream& os, std::string_view s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline void write_shape(std::ostream& os, const Shape& shape) {
  write_u32(os, static_cast<std::uint32_t>(shape.size()));
  for (std::size_t d : shape) write_u64(os, d);
}

inline void write_tensor(std::ostream& os, const Tensor& t) {
  write_shape(os, t.shape());
  for (double v : t.data()) write_f64(os, v);
}

inline void read_exact(std::istream& is, char* dst, std::size_t n, const char* what) {
  is.read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) {
    throw ParseError(std::string("truncated input while reading ") + what);
  }
}

inline std::uint32_t read_u32(std::istream& is, const char* what = "u32") {
  std::array<unsigned char, 4> b{};
  read_exact(is, reinterpret_cast<char*>(b.data()), 4, what);
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | b[static_cast<std::size_t>(i)];
  return v;
}

inline std::uint64_t read_u64(std::istream& is, const char* what = "u64") {
  std::array<unsigned char, 8> b{};
  read_exact(is, reinterpret_cast<char*>(b.data()), 8, what);
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[static_cast<std::size_t>(i)];
  return v;
}

inline double read_f64(std::istream& is, const char* what = "f64") {
  return std::bit_cast<double>(read_u64(is, what));
}

inline std::string read_string(std::istream& is, const char* what = "string") {
  const std::uint32_t n = read_u32(is, what);
  if (n > (1u << 24)) throw ParseError(std::string("implausible string length while reading ") + what);
  std::string s(n, '\0');
  if (n) read_exact(is, s.data(), n, what);
  return s;
}

inline Shape read_shape(std::istream& is, const char* what = "shape") {
  const std::uint32_t rank = read_u32(is, what);
  if (rank > 8) throw ParseError(std::string("implausible tensor rank while reading ") + what);
  Shape s(rank);
  for (auto& d : s) d = read_u64(is, what);
  return s;
}

inline Tensor read_tensor(std::istream& is, const char* what = "tensor") {
  Shape s = read_shape(is, what);
  const std::size_t n = shape_volume(s);
  if (n > (std::size_t{1} << 32)) throw ParseError(std::string("implausible tensor size while reading ") + what);
  std::vector<double> data(n);
  for (double& v : data) v = read_f64(is, what);
  return Tensor(std::move(s), std::move(data));
}

inline void expect_magic(std::istream& is, std::string_view magic, const char* what) {
  std::string got(magic.size(), '\0');
  read_exact(is, got.data(), got.size(), what);
  if (got != magic) throw ParseError(std::string("bad magic in ") + what + ", expected " + std::string(magic));
}

}  // namespace mlosr::binary
