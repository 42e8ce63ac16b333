#pragma once

// Little-endian byte buffers with offset-aware reads.

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <utility>

#include "mmtprobe/errors.hpp"

namespace mmtprobe {

class ByteWriter {
 public:
  void u32(std::uint32_t v) { put_le(v); }
  void u64(std::uint64_t v) { put_le(v); }
  void f32(float v) { put_le(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { put_le(std::bit_cast<std::uint64_t>(v)); }
  void bytes(std::string_view s) { buf_.append(s.data(), s.size()); }

  const std::string& str() const noexcept { return buf_; }
  std::string take() { return std::move(buf_); }

 private:
  template <typename U>
  void put_le(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }

  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view data) : data_(data) {}

  std::uint32_t u32(const char* what) { return get_le<std::uint32_t>(what); }
  std::uint64_t u64(const char* what) { return get_le<std::uint64_t>(what); }
  float f32(const char* what) { return std::bit_cast<float>(get_le<std::uint32_t>(what)); }
  double f64(const char* what) { return std::bit_cast<double>(get_le<std::uint64_t>(what)); }

  std::string_view bytes(std::size_t n, const char* what) {
    need(n, what);
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t offset() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return data_.size() - pos_; }

  [[noreturn]] void fail(const std::string& what) const { throw FormatError(what, pos_); }

 private:
  void need(std::size_t n, const char* what) {
    if (data_.size() - pos_ < n) throw FormatError(std::string("unexpected end of data reading ") + what, data_.size());
  }

  template <typename U>
  U get_le(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      v |= static_cast<U>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return v;
  }

  std::string_view data_;
  std::size_t pos_ = 0;
};

}  // namespace mmtprobe
