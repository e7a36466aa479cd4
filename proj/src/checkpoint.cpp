#include "umf/checkpoint.hpp"

#include "umf/binary_io.hpp"
#include "umf/errors.hpp"

#include <cstring>

namespace umf {

namespace {
constexpr char kMagic[4] = {'U', 'M', 'F', 'W'};
}

const CheckpointSection& Checkpoint::section(const std::string& name) const {
  for (const auto& s : sections)
    if (s.name == name) return s;
  throw MissingArtifact("checkpoint has no section '" + name + "'");
}

bool Checkpoint::has_section(const std::string& name) const {
  for (const auto& s : sections)
    if (s.name == name) return true;
  return false;
}

std::vector<unsigned char> Checkpoint::encode() const {
  io::ByteWriter w;
  w.bytes(kMagic, 4);
  w.u32(kVersion);
  w.u32(static_cast<std::uint32_t>(sections.size()));
  for (const auto& s : sections) {
    w.str(s.name);
    w.str(s.meta);
    w.u32(static_cast<std::uint32_t>(s.tensors.size()));
    for (const auto& t : s.tensors) {
      w.str(t.name);
      w.u32(static_cast<std::uint32_t>(t.shape.size()));
      for (auto d : t.shape) w.u32(d);
      w.bytes(t.data.data(), t.data.size() * sizeof(float));
    }
  }
  return w.buffer();
}

Checkpoint Checkpoint::decode(std::vector<unsigned char> bytes) {
  io::ByteReader r(std::move(bytes));
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw FormatError(FormatErrorKind::BadMagic, "not a UMFW checkpoint");
  const auto version = r.u32();
  if (version != kVersion)
    throw FormatError(FormatErrorKind::VersionMismatch,
                      "unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  const auto n_sections = r.u32();
  for (std::uint32_t i = 0; i < n_sections; ++i) {
    CheckpointSection s;
    s.name = r.str();
    s.meta = r.str();
    const auto n_tensors = r.u32();
    for (std::uint32_t j = 0; j < n_tensors; ++j) {
      StoredTensor t;
      t.name = r.str();
      const auto rank = r.u32();
      if (rank > 8) throw FormatError(FormatErrorKind::Malformed, "tensor rank too large");
      std::size_t count = 1;
      for (std::uint32_t d = 0; d < rank; ++d) {
        t.shape.push_back(r.u32());
        count *= t.shape.back();
      }
      if (count * sizeof(float) > r.remaining())
        throw FormatError(FormatErrorKind::Truncated, "tensor data runs past end of file");
      t.data.resize(count);
      r.bytes(t.data.data(), count * sizeof(float));
      s.tensors.push_back(std::move(t));
    }
    ck.sections.push_back(std::move(s));
  }
  if (!r.at_end()) throw FormatError(FormatErrorKind::Malformed, "trailing bytes in checkpoint");
  return ck;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  io::write_file_atomic(path, encode());
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  return decode(io::read_file(path));
}

CheckpointSection section_from_params(const std::string& name, const std::string& meta,
                                      const nn::ParamStore& params) {
  CheckpointSection s{name, meta, {}};
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Mat& v = params.value(i);
    StoredTensor t;
    t.name = params.name(i);
    t.shape = {static_cast<std::uint32_t>(v.rows()), static_cast<std::uint32_t>(v.cols())};
    t.data.resize(static_cast<std::size_t>(v.size()));
    for (Eigen::Index k = 0; k < v.size(); ++k) t.data[k] = static_cast<float>(v.data()[k]);
    s.tensors.push_back(std::move(t));
  }
  return s;
}

void params_from_section(const CheckpointSection& section, nn::ParamStore& params) {
  std::vector<bool> seen(params.size(), false);
  for (const auto& t : section.tensors) {
    if (!params.contains(t.name))
      throw FormatError(FormatErrorKind::Malformed, "unexpected parameter " + t.name);
    const int idx = params.index(t.name);
    Mat& v = params.value(idx);
    if (t.shape.size() != 2 || t.shape[0] != v.rows() || t.shape[1] != v.cols())
      throw FormatError(FormatErrorKind::Malformed, "shape mismatch for " + t.name);
    for (Eigen::Index k = 0; k < v.size(); ++k) v.data()[k] = static_cast<double>(t.data[k]);
    seen[idx] = true;
  }
  for (std::size_t i = 0; i < seen.size(); ++i)
    if (!seen[i])
      throw FormatError(FormatErrorKind::Malformed,
                        "section '" + section.name + "' lacks parameter " + params.name(i));
}

}  // namespace umf
