#pragma once

#include "umf/nn.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace umf {

// One stored parameter, kept in the on-disk precision.
struct StoredTensor {
  std::string name;
  std::vector<std::uint32_t> shape;
  std::vector<float> data;
};

struct CheckpointSection {
  std::string name;   // e.g. "pflow", "sflow", "vae"
  std::string meta;   // JSON text describing the architecture
  std::vector<StoredTensor> tensors;
};

// "UMFW" container: magic, u32 version, u32 section count, then per section
// name, meta, u32 tensor count, and per tensor name, u32 rank, u32 dims,
// row-major little-endian float32 data.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;
  std::vector<CheckpointSection> sections;

  const CheckpointSection& section(const std::string& name) const;
  bool has_section(const std::string& name) const;

  std::vector<unsigned char> encode() const;
  static Checkpoint decode(std::vector<unsigned char> bytes);

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);
};

CheckpointSection section_from_params(const std::string& name, const std::string& meta,
                                      const nn::ParamStore& params);

// Overwrites values of `params` from the section; every parameter must be present
// with a matching shape.
void params_from_section(const CheckpointSection& section, nn::ParamStore& params);

}  // namespace umf
