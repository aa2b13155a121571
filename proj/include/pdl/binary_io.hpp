#pragma once

// Little-endian binary encoding shared by the corpus cache and checkpoints,
// plus whole-file helpers. Every write goes through a temp file and rename.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace pdl::io {

class Writer {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f64(double v);
  /// u32 length prefix, then raw bytes.
  void str(std::string_view s);
  void raw(std::string_view s) { buf_.append(s); }

  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  /// `what` names the source in error messages.
  Reader(std::string data, std::string what) : data_(std::move(data)), what_(std::move(what)) {}

  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  double f64();
  std::string str();
  /// Reads `magic.size()` bytes and throws FormatError unless they match.
  void expect(std::string_view magic);

  bool at_end() const { return pos_ == data_.size(); }
  std::size_t position() const { return pos_; }

 private:
  void need(std::size_t n);

  std::string data_;
  std::string what_;
  std::size_t pos_ = 0;
};

/// Whole file contents; throws pdl::Error when the file cannot be read.
std::string read_file(const std::filesystem::path& path);
std::vector<std::string> read_lines(const std::filesystem::path& path);

/// Writes `path.tmp.<pid>` and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

}  // namespace pdl::io
