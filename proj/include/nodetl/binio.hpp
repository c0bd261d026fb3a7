#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include "nodetl/errors.hpp"

namespace nodetl::binio {

// Little-endian encoders, independent of host byte order.
inline void put_u8(std::vector<unsigned char>& buf, std::uint8_t v) { buf.push_back(v); }

inline void put_u32(std::vector<unsigned char>& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

inline void put_u64(std::vector<unsigned char>& buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

inline void put_f32(std::vector<unsigned char>& buf, float v) {
  put_u32(buf, std::bit_cast<std::uint32_t>(v));
}

inline void put_f64(std::vector<unsigned char>& buf, double v) {
  put_u64(buf, std::bit_cast<std::uint64_t>(v));
}

inline void put_bytes(std::vector<unsigned char>& buf, std::string_view s) {
  buf.insert(buf.end(), s.begin(), s.end());
}

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  return std::vector<unsigned char>((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
}

inline void write_file(const std::string& path, const std::vector<unsigned char>& buf) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw FormatError("write failed for " + path);
}

// Sequential reader; every failure names the field and the byte offset.
class Reader {
 public:
  explicit Reader(const std::vector<unsigned char>& buf) : buf_(buf) {}

  std::size_t offset() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return buf_.size() - pos_; }

  void need(std::size_t n, std::string_view field) const {
    if (remaining() < n) {
      throw FormatError("truncated file: " + std::string(field) + " needs " + std::to_string(n) +
                            " bytes at offset " + std::to_string(pos_),
                        pos_);
    }
  }

  void expect_magic(std::string_view magic, std::string_view field = "magic") {
    need(magic.size(), field);
    if (std::memcmp(buf_.data() + pos_, magic.data(), magic.size()) != 0) {
      throw FormatError("bad " + std::string(field) + ": expected \"" + std::string(magic) + "\"",
                        pos_);
    }
    pos_ += magic.size();
  }

  std::uint8_t u8(std::string_view field) {
    need(1, field);
    return buf_[pos_++];
  }

  std::uint32_t u32(std::string_view field) {
    need(4, field);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::uint64_t u64(std::string_view field) {
    need(8, field);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }

  float f32(std::string_view field) { return std::bit_cast<float>(u32(field)); }
  double f64(std::string_view field) { return std::bit_cast<double>(u64(field)); }

  void expect_end() const {
    if (remaining() != 0) {
      throw FormatError("trailing bytes: " + std::to_string(remaining()) + " unexpected bytes at offset " +
                            std::to_string(pos_),
                        pos_);
    }
  }

 private:
  const std::vector<unsigned char>& buf_;
  std::size_t pos_ = 0;
};

}  // namespace nodetl::binio
