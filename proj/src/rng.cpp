#include "umf/rng.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

namespace umf {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

Rng Rng::derive(std::uint64_t seed, std::initializer_list<std::uint64_t> ids) {
  std::uint64_t h = splitmix64(seed);
  for (auto id : ids) h = splitmix64(h ^ splitmix64(id + 0x632be59bd9b4e019ULL));
  return Rng(h);
}

double Rng::uniform() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
  const double u1 = 1.0 - uniform();  // (0, 1]
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

int Rng::uniform_int(int n) {
  return static_cast<int>(uniform() * n);
}

Mat Rng::normal_matrix(Eigen::Index rows, Eigen::Index cols) {
  Mat m(rows, cols);
  fill_normal(m);
  return m;
}

void Rng::fill_normal(Mat& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal();
}

std::string Rng::serialize() const {
  std::ostringstream os;
  os << engine_;
  return os.str();
}

void Rng::deserialize(const std::string& s) {
  std::istringstream is(s);
  is >> engine_;
}

}  // namespace umf
