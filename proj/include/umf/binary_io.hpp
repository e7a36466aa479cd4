#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace umf::io {

// Little-endian writer into an in-memory buffer.
class ByteWriter {
 public:
  void bytes(const void* data, std::size_t n);
  void u16(std::uint16_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v);
  void f64(double v);
  void str(const std::string& s);  // u32 length + bytes

  const std::vector<unsigned char>& buffer() const { return buf_; }

 private:
  std::vector<unsigned char> buf_;
};

// Bounds-checked little-endian reader. Running past the end throws FormatError(Truncated).
class ByteReader {
 public:
  explicit ByteReader(std::vector<unsigned char> data) : buf_(std::move(data)) {}
  void bytes(void* out, std::size_t n);
  std::uint16_t u16();
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  double f64();
  std::string str();
  std::size_t remaining() const { return buf_.size() - pos_; }
  bool at_end() const { return pos_ == buf_.size(); }

 private:
  std::vector<unsigned char> buf_;
  std::size_t pos_ = 0;
};

std::vector<unsigned char> read_file(const std::filesystem::path& path);

// Writes to `<path>.tmp` then renames over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::vector<unsigned char>& data);
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

// 64-bit FNV-1a of a file's bytes, hex encoded.
std::string file_hash(const std::filesystem::path& path);
std::string bytes_hash(const std::vector<unsigned char>& data);

}  // namespace umf::io
