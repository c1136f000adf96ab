#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "dydit/error.hpp"
#include "dydit/tensor.hpp"

namespace dydit::io {

// Little-endian primitive encoding, independent of host byte order.

template <typename U>
void put_le(std::ostream& os, U value) {
  static_assert(std::is_unsigned_v<U>);
  unsigned char buf[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<unsigned char>((value >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

inline void put_u16(std::ostream& os, std::uint16_t v) { put_le(os, v); }
inline void put_u32(std::ostream& os, std::uint32_t v) { put_le(os, v); }
inline void put_u64(std::ostream& os, std::uint64_t v) { put_le(os, v); }
inline void put_f32(std::ostream& os, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(os, bits);
}
inline void put_f64(std::ostream& os, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(os, bits);
}

/// Reader that tracks its byte offset for diagnostics.
class Reader {
 public:
  Reader(std::istream& is, std::string what) : is_(is), what_(std::move(what)) {}

  std::uint64_t offset() const { return offset_; }

  void bytes(void* dst, std::size_t n) {
    is_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    require(static_cast<std::size_t>(is_.gcount()) == n, what_, ": truncated at byte offset ", offset_ + static_cast<std::uint64_t>(is_.gcount()),
            " (needed ", n, " more bytes at offset ", offset_, ")");
    offset_ += n;
  }

  template <typename U>
  U le() {
    unsigned char buf[sizeof(U)];
    bytes(buf, sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(buf[i]) << (8 * i));
    return v;
  }
  std::uint16_t u16() { return le<std::uint16_t>(); }
  std::uint32_t u32() { return le<std::uint32_t>(); }
  std::uint64_t u64() { return le<std::uint64_t>(); }
  float f32() {
    const auto bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  double f64() {
    const auto bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  void magic(const char* expected) {
    const std::size_t n = std::strlen(expected);
    const auto at = offset_;
    std::string got(n, '\0');
    bytes(got.data(), n);
    require(got == expected, what_, ": bad magic at byte offset ", at, " (expected '", expected, "')");
  }
  [[noreturn]] void error(const std::string& msg, std::uint64_t at) const { fail(what_, ": ", msg, " at byte offset ", at); }

 private:
  std::istream& is_;
  std::string what_;
  std::uint64_t offset_ = 0;
};

/// Named tensor record: u32 name length, UTF-8 name, u32 rank, u64 extents,
/// raw float32 values.
inline void write_tensor(std::ostream& os, const std::string& name, const Tensor& t) {
  put_u32(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) put_u64(os, static_cast<std::uint64_t>(e));
  for (float v : t.data()) put_f32(os, v);
}

inline std::pair<std::string, Tensor> read_tensor(Reader& r) {
  const auto at = r.offset();
  const auto len = r.u32();
  if (len > (1u << 16)) r.error("implausible tensor name length", at);
  std::string name(len, '\0');
  r.bytes(name.data(), len);
  const auto rank = r.u32();
  if (rank > 8) r.error("implausible tensor rank for '" + name + "'", at);
  Shape shape;
  for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(static_cast<std::int64_t>(r.u64()));
  const auto n = numel(shape);
  if (n < 0 || n > (std::int64_t{1} << 32)) r.error("implausible tensor size for '" + name + "'", at);
  std::vector<float> data(static_cast<std::size_t>(n));
  for (auto& v : data) v = r.f32();
  return {name, Tensor(shape, std::move(data))};
}

/// 8-bit binary PPM (3 channels) or PGM (1 channel) from a cin x E x E image
/// with values in [-1, 1].
inline void write_pnm(const std::string& path, std::span<const float> chw, int channels, int extent) {
  require(channels == 1 || channels == 3, "image export supports 1 or 3 channels, got ", channels);
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), "cannot write image '", path, "'");
  out << (channels == 3 ? "P6" : "P5") << '\n' << extent << ' ' << extent << "\n255\n";
  const std::size_t plane = static_cast<std::size_t>(extent) * static_cast<std::size_t>(extent);
  for (std::size_t p = 0; p < plane; ++p)
    for (int c = 0; c < channels; ++c) {
      const float v = chw[static_cast<std::size_t>(c) * plane + p];
      const double q = std::round((std::clamp(static_cast<double>(v), -1.0, 1.0) + 1.0) * 127.5);
      out.put(static_cast<char>(static_cast<unsigned char>(q)));
    }
  require(static_cast<bool>(out), "failed writing image '", path, "'");
}

}  // namespace dydit::io
