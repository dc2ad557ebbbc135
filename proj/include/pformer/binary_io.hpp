#pragma once

// Little-endian byte encoding shared by the checkpoint and dataset formats,
// plus atomic (write-then-rename) file output.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <string_view>

#include "pformer/errors.hpp"
#include "pformer/types.hpp"

namespace pformer::io {

class ByteWriter {
 public:
  void put_bytes(std::string_view bytes) { buf_.append(bytes); }
  void put_u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void put_u32(std::uint32_t v) { put_le(v); }
  void put_i32(std::int32_t v) { put_le(static_cast<std::uint32_t>(v)); }
  void put_u64(std::uint64_t v) { put_le(v); }
  void put_i64(std::int64_t v) { put_le(static_cast<std::uint64_t>(v)); }
  void put_f64(double v) { put_le(std::bit_cast<std::uint64_t>(v)); }
  void put_string(std::string_view s) {
    put_u32(static_cast<std::uint32_t>(s.size()));
    buf_.append(s);
  }
  // rows, cols, then row-major values.
  void put_matrix(const Mat& m) {
    put_i64(m.rows());
    put_i64(m.cols());
    put_values(m);
  }
  void put_values(const Mat& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) put_f64(m.data()[i]);
  }

  const std::string& bytes() const { return buf_; }

 private:
  template <class U>
  void put_le(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
    }
  }

  std::string buf_;
};

class ByteReader {
 public:
  ByteReader(std::string data, std::string source) : data_(std::move(data)), source_(std::move(source)) {}

  std::string_view take(std::size_t n) {
    if (n > data_.size() - pos_) {
      throw FormatError(source_ + ": truncated at byte " + std::to_string(pos_));
    }
    std::string_view out(data_.data() + pos_, n);
    pos_ += n;
    return out;
  }
  std::uint8_t u8() { return static_cast<std::uint8_t>(take(1)[0]); }
  std::uint32_t u32() { return get_le<std::uint32_t>(); }
  std::int32_t i32() { return static_cast<std::int32_t>(get_le<std::uint32_t>()); }
  std::uint64_t u64() { return get_le<std::uint64_t>(); }
  std::int64_t i64() { return static_cast<std::int64_t>(get_le<std::uint64_t>()); }
  double f64() { return std::bit_cast<double>(get_le<std::uint64_t>()); }
  std::string string() {
    const std::uint32_t n = u32();
    return std::string(take(n));
  }
  Mat matrix() {
    const std::int64_t rows = i64();
    const std::int64_t cols = i64();
    if (rows < 0 || cols < 0 || (cols > 0 && rows > static_cast<std::int64_t>(remaining() / 8) / cols)) {
      throw FormatError(source_ + ": implausible matrix shape " + std::to_string(rows) + "x" +
                        std::to_string(cols));
    }
    return values(rows, cols);
  }
  Mat values(std::int64_t rows, std::int64_t cols) {
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = f64();
    return m;
  }

  std::size_t remaining() const { return data_.size() - pos_; }
  bool at_end() const { return pos_ == data_.size(); }
  const std::string& source() const { return source_; }

 private:
  template <class U>
  U get_le() {
    const std::string_view b = take(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      v |= static_cast<U>(static_cast<unsigned char>(b[i])) << (8 * i);
    }
    return v;
  }

  std::string data_;
  std::string source_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::filesystem::path& path);

// Writes to a sibling temporary file and renames it into place, so readers
// never observe a partial file.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

}  // namespace pformer::io
