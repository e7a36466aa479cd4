#include "umf/binary_io.hpp"

#include "umf/errors.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>

namespace umf::io {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

void ByteWriter::bytes(const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  buf_.insert(buf_.end(), p, p + n);
}
void ByteWriter::u16(std::uint16_t v) { bytes(&v, sizeof v); }
void ByteWriter::u32(std::uint32_t v) { bytes(&v, sizeof v); }
void ByteWriter::u64(std::uint64_t v) { bytes(&v, sizeof v); }
void ByteWriter::f32(float v) { bytes(&v, sizeof v); }
void ByteWriter::f64(double v) { bytes(&v, sizeof v); }
void ByteWriter::str(const std::string& s) {
  u32(static_cast<std::uint32_t>(s.size()));
  bytes(s.data(), s.size());
}

void ByteReader::bytes(void* out, std::size_t n) {
  if (n > remaining())
    throw FormatError(FormatErrorKind::Truncated, "unexpected end of file");
  std::memcpy(out, buf_.data() + pos_, n);
  pos_ += n;
}
std::uint16_t ByteReader::u16() { std::uint16_t v; bytes(&v, sizeof v); return v; }
std::uint32_t ByteReader::u32() { std::uint32_t v; bytes(&v, sizeof v); return v; }
std::uint64_t ByteReader::u64() { std::uint64_t v; bytes(&v, sizeof v); return v; }
float ByteReader::f32() { float v; bytes(&v, sizeof v); return v; }
double ByteReader::f64() { double v; bytes(&v, sizeof v); return v; }
std::string ByteReader::str() {
  const auto n = u32();
  if (n > remaining())
    throw FormatError(FormatErrorKind::Truncated, "string runs past end of file");
  std::string s(n, '\0');
  bytes(s.data(), n);
  return s;
}

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifact("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_atomic(const std::filesystem::path& path, const std::vector<unsigned char>& data) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size()));
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::vector<unsigned char>(text.begin(), text.end()));
}

std::string bytes_hash(const std::vector<unsigned char>& data) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : data) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string file_hash(const std::filesystem::path& path) { return bytes_hash(read_file(path)); }

}  // namespace umf::io
