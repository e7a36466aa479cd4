#include "umf/toy_data.hpp"

#include "umf/binary_io.hpp"
#include "umf/errors.hpp"
#include "umf/rng.hpp"

#include <cmath>
#include <cstring>
#include <numbers>

namespace umf {

namespace {
constexpr char kDatasetMagic[4] = {'U', 'M', 'F', 'D'};
constexpr std::uint32_t kDatasetVersion = 1;
}  // namespace

void ToyDataConfig::validate() const {
  UMF_REQUIRE(frames >= 2, "toy data: frames must be >= 2");
  UMF_REQUIRE(joints >= 1, "toy data: joints must be >= 1");
  UMF_REQUIRE(delay >= 0 && delay < frames, "toy data: delay must lie in [0, frames)");
  UMF_REQUIRE(noise >= 0.0, "toy data: noise must be >= 0");
}

std::vector<std::pair<double, double>> limb_offsets(int joints) {
  // Forward, backward, left and right limbs; lengths 0.3, 0.25, 0.2, 0.2.
  static const std::pair<double, double> base[] = {
      {0.3, 0.0}, {-0.25, 0.0}, {0.0, 0.2}, {0.0, -0.2}};
  std::vector<std::pair<double, double>> out;
  for (int j = 1; j < joints; ++j) {
    const auto& b = base[(j - 1) % 4];
    const double grow = 1.0 + 0.25 * ((j - 1) / 4);
    out.emplace_back(b.first * grow, b.second * grow);
  }
  return out;
}

MotionSequence reaction_oracle(const MotionSequence& agent, const ToyDataConfig& config) {
  UMF_REQUIRE(agent.cols() % 2 == 0, "reaction oracle: odd feature width");
  MotionSequence out(agent.rows(), agent.cols());
  for (Eigen::Index f = 0; f < agent.rows(); ++f) {
    const Eigen::Index src = std::max<Eigen::Index>(0, f - config.delay);
    for (Eigen::Index j = 0; j < agent.cols() / 2; ++j) {
      out(f, 2 * j) = agent(src, 2 * j) + config.offset_x;
      out(f, 2 * j + 1) = -agent(src, 2 * j + 1) + config.offset_y;
    }
  }
  return out;
}

MotionSequence synthesize_initiator(TrajectoryClass cls, std::uint64_t seed,
                                    const ToyDataConfig& config) {
  Rng rng(seed);
  const int n = config.frames;
  const double pi = std::numbers::pi;
  // Per-scene randomization shared by all classes.
  const double size = 0.8 + 0.4 * rng.uniform();
  const double phase = 2.0 * pi * rng.uniform();
  const double rot = 2.0 * pi * rng.uniform();
  const double cx = 0.5 * (rng.uniform() - 0.5), cy = 0.5 * (rng.uniform() - 0.5);
  const double dir = rng.uniform() < 0.5 ? -1.0 : 1.0;

  Mat root(n, 2);
  for (int f = 0; f < n; ++f) {
    const double u = static_cast<double>(f) / (n - 1);  // [0, 1]
    double x = 0, y = 0;
    switch (cls) {
      case TrajectoryClass::Circle: {
        const double a = phase + dir * 2.0 * pi * u;
        x = size * std::cos(a);
        y = size * std::sin(a);
        break;
      }
      case TrajectoryClass::Zigzag: {
        x = size * (2.0 * u - 1.0);
        y = 0.35 * size * std::sin(dir * 6.0 * pi * u + phase);
        break;
      }
      case TrajectoryClass::FigureEight: {
        const double a = phase + dir * 2.0 * pi * u;
        x = size * std::sin(a);
        y = 0.6 * size * std::sin(a) * std::cos(a);
        break;
      }
      case TrajectoryClass::StraightWalk: {
        x = size * (2.0 * u - 1.0);
        y = 0.05 * std::sin(phase + 8.0 * pi * u);
        break;
      }
    }
    const double xr = std::cos(rot) * x - std::sin(rot) * y + cx;
    const double yr = std::sin(rot) * x + std::cos(rot) * y + cy;
    root(f, 0) = xr;
    root(f, 1) = yr;
  }

  const auto limbs = limb_offsets(config.joints);
  MotionSequence m(n, config.dims());
  for (int f = 0; f < n; ++f) {
    // Heading from the central difference of the root path.
    const int a = std::max(0, f - 1), b = std::min(n - 1, f + 1);
    const double hx = root(b, 0) - root(a, 0), hy = root(b, 1) - root(a, 1);
    const double heading = std::atan2(hy, hx);
    const double c = std::cos(heading), s = std::sin(heading);
    m(f, 0) = root(f, 0);
    m(f, 1) = root(f, 1);
    for (std::size_t j = 0; j < limbs.size(); ++j) {
      const auto [ox, oy] = limbs[j];
      m(f, 2 * (j + 1)) = root(f, 0) + c * ox - s * oy;
      m(f, 2 * (j + 1) + 1) = root(f, 1) + s * ox + c * oy;
    }
  }
  return m;
}

std::vector<Scene> synthesize_dataset(int n_scenes, int n_agents, std::uint64_t seed,
                                      const ToyDataConfig& config) {
  UMF_REQUIRE(n_scenes >= 0, "synthesize_dataset: n_scenes must be >= 0");
  UMF_REQUIRE(n_agents >= 1, "synthesize_dataset: n_agents must be >= 1");
  config.validate();
  std::vector<Scene> scenes(n_scenes);
  for (int i = 0; i < n_scenes; ++i) {
    Rng rng = Rng::derive(seed, {static_cast<std::uint64_t>(i)});
    Scene& sc = scenes[i];
    sc.label = rng.uniform_int(kNumTrajectoryClasses);
    sc.agents.push_back(
        synthesize_initiator(static_cast<TrajectoryClass>(sc.label), rng.next_u64(), config));
    for (int a = 1; a < n_agents; ++a) {
      MotionSequence next = reaction_oracle(sc.agents.back(), config);
      if (config.noise > 0.0) next += config.noise * rng.normal_matrix(next.rows(), next.cols());
      sc.agents.push_back(std::move(next));
    }
  }
  return scenes;
}

Mat bone_lengths(const MotionSequence& m) {
  const Eigen::Index joints = m.cols() / 2;
  Mat out(m.rows(), std::max<Eigen::Index>(0, joints - 1));
  for (Eigen::Index f = 0; f < m.rows(); ++f)
    for (Eigen::Index j = 1; j < joints; ++j)
      out(f, j - 1) = std::hypot(m(f, 2 * j) - m(f, 0), m(f, 2 * j + 1) - m(f, 1));
  return out;
}

Dataset Dataset::from_scenes(std::vector<Scene> scenes) {
  Dataset d;
  d.scenes = std::move(scenes);
  if (!d.scenes.empty()) {
    d.n_agents = static_cast<int>(d.scenes.front().agents.size());
    d.frames = static_cast<int>(d.scenes.front().agents.front().rows());
    d.dims = static_cast<int>(d.scenes.front().agents.front().cols());
  }
  for (const auto& s : d.scenes) {
    UMF_REQUIRE(static_cast<int>(s.agents.size()) == d.n_agents,
                "dataset: scenes must have equal agent counts");
    for (const auto& a : s.agents)
      UMF_REQUIRE(a.rows() == d.frames && a.cols() == d.dims,
                  "dataset: every agent must share the frame count and width");
  }
  d.compute_statistics();
  return d;
}

void Dataset::compute_statistics() {
  mean = RowVec::Zero(dims);
  std = RowVec::Ones(dims);
  if (scenes.empty()) return;
  RowVec sum = RowVec::Zero(dims), sq = RowVec::Zero(dims);
  double count = 0;
  for (const auto& s : scenes)
    for (const auto& a : s.agents) {
      sum += a.colwise().sum();
      sq += a.array().square().matrix().colwise().sum();
      count += static_cast<double>(a.rows());
    }
  mean = sum / count;
  for (int c = 0; c < dims; ++c) {
    const double var = sq(c) / count - mean(c) * mean(c);
    std(c) = std::sqrt(std::max(var, 1e-12));
  }
  // Round-trip through the on-disk precision so loaded files normalize identically.
  for (int c = 0; c < dims; ++c) {
    mean(c) = static_cast<float>(mean(c));
    std(c) = static_cast<float>(std(c));
  }
}

Mat Dataset::normalize(const MotionSequence& m) const {
  return ((m.rowwise() - mean).array().rowwise() / std.array()).matrix();
}

MotionSequence Dataset::denormalize(const Mat& m) const {
  Mat out = (m.array().rowwise() * std.array()).matrix();
  out.rowwise() += mean;
  return out;
}

std::vector<unsigned char> encode_dataset(const Dataset& data, const char magic[4]) {
  io::ByteWriter w;
  w.bytes(magic, 4);
  w.u32(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(data.scenes.size()));
  w.u32(static_cast<std::uint32_t>(data.n_agents));
  w.u32(static_cast<std::uint32_t>(data.frames));
  w.u32(static_cast<std::uint32_t>(data.dims));
  for (int c = 0; c < data.dims; ++c) w.f32(static_cast<float>(data.mean(c)));
  for (int c = 0; c < data.dims; ++c) w.f32(static_cast<float>(data.std(c)));
  for (const auto& s : data.scenes)
    for (const auto& a : s.agents)
      for (Eigen::Index i = 0; i < a.size(); ++i) w.f32(static_cast<float>(a.data()[i]));
  for (const auto& s : data.scenes) w.u16(static_cast<std::uint16_t>(s.label));
  return w.buffer();
}

Dataset decode_dataset(std::vector<unsigned char> bytes, const char magic[4]) {
  io::ByteReader r(std::move(bytes));
  char m[4];
  r.bytes(m, 4);
  if (std::memcmp(m, magic, 4) != 0)
    throw FormatError(FormatErrorKind::BadMagic,
                      "bad magic: expected " + std::string(magic, 4));
  const auto version = r.u32();
  if (version != kDatasetVersion)
    throw FormatError(FormatErrorKind::VersionMismatch,
                      "unsupported dataset version " + std::to_string(version));
  Dataset d;
  const auto n_scenes = r.u32();
  d.n_agents = static_cast<int>(r.u32());
  d.frames = static_cast<int>(r.u32());
  d.dims = static_cast<int>(r.u32());
  const std::size_t payload = static_cast<std::size_t>(n_scenes) * d.n_agents * d.frames * d.dims;
  if ((2 * static_cast<std::size_t>(d.dims) + payload) * 4 + 2 * std::size_t{n_scenes} >
      r.remaining())
    throw FormatError(FormatErrorKind::Truncated, "dataset payload truncated");
  d.mean.resize(d.dims);
  d.std.resize(d.dims);
  for (int c = 0; c < d.dims; ++c) d.mean(c) = r.f32();
  for (int c = 0; c < d.dims; ++c) d.std(c) = r.f32();
  std::vector<Scene> scenes(n_scenes);
  for (auto& s : scenes)
    for (int a = 0; a < d.n_agents; ++a) {
      MotionSequence seq(d.frames, d.dims);
      for (Eigen::Index i = 0; i < seq.size(); ++i) seq.data()[i] = r.f32();
      s.agents.push_back(std::move(seq));
    }
  for (auto& s : scenes) s.label = r.u16();
  if (!r.at_end()) throw FormatError(FormatErrorKind::Malformed, "trailing bytes in dataset");
  d.scenes = std::move(scenes);
  return d;
}

void save_dataset(const Dataset& data, const std::filesystem::path& path) {
  io::write_file_atomic(path, encode_dataset(data, kDatasetMagic));
}

Dataset load_dataset(const std::filesystem::path& path) {
  return decode_dataset(io::read_file(path), kDatasetMagic);
}

bool is_validation_scene(std::uint64_t seed, std::size_t index, double val_fraction) {
  const std::uint64_t h = splitmix64(splitmix64(seed ^ 0x5eed5eedULL) + index);
  return static_cast<double>(h >> 11) * 0x1.0p-53 < val_fraction;
}

}  // namespace umf
