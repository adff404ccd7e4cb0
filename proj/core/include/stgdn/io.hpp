#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace stgdn::io {

// Writes to "<path>.tmp" then renames over `path`, so readers never observe
// a partially written file.
void write_file_atomic(const std::string& path, std::string_view bytes);
std::string read_file(const std::string& path);

std::vector<std::string> split(std::string_view s, char sep);
std::string_view trim(std::string_view s);
double parse_double(std::string_view s, const std::string& what);
long long parse_int(std::string_view s, const std::string& what);

// Little-endian encoder.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v);
  void f64(double v);
  void bytes(std::string_view s) { buf_.append(s); }
  const std::string& str() const { return buf_; }

 private:
  std::string buf_;
};

// Little-endian decoder over an in-memory buffer; throws ValidationError
// mentioning `what` when reading past the end.
class ByteReader {
 public:
  ByteReader(std::string_view data, std::string what) : data_(data), what_(std::move(what)) {}
  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  double f64();
  std::string_view bytes(std::size_t n);
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n) const;

  std::string_view data_;
  std::size_t pos_ = 0;
  std::string what_;
};

// FNV-1a, used for config digests.
std::uint64_t fnv1a(std::string_view s);

}  // namespace stgdn::io
