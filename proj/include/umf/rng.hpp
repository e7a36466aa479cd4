#pragma once

#include "umf/tensor.hpp"

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string>

namespace umf {

// Deterministic random source. Normal draws use a stateless Box-Muller
// transform so the whole state is the engine and can be round-tripped.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  // Independent stream keyed by (seed, ids...), e.g. (seed, scene index).
  static Rng derive(std::uint64_t seed, std::initializer_list<std::uint64_t> ids);

  std::uint64_t next_u64() { return engine_(); }
  double uniform();  // [0, 1)
  double normal();
  int uniform_int(int n);  // [0, n)

  Mat normal_matrix(Eigen::Index rows, Eigen::Index cols);
  void fill_normal(Mat& m);

  std::string serialize() const;
  void deserialize(const std::string& s);

 private:
  std::mt19937_64 engine_;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace umf
