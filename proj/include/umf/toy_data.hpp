#pragma once

#include "umf/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace umf {

// Frames x (2 * joints) array; joint j occupies columns (2j, 2j + 1) = (x, y).
using MotionSequence = Mat;

enum class TrajectoryClass : int { Circle = 0, Zigzag = 1, FigureEight = 2, StraightWalk = 3 };
inline constexpr int kNumTrajectoryClasses = 4;

// One multi-agent sample: agents[0] is the initiator, agents[i+1] reacts to agents[i].
struct Scene {
  std::vector<MotionSequence> agents;
  int label = 0;
};

struct ToyDataConfig {
  int frames = 64;
  int joints = 5;          // root + 4 limbs in a star skeleton
  int delay = 8;           // reaction delay in frames
  double offset_x = 1.5;   // reactor displacement
  double offset_y = 0.0;
  double noise = 0.01;     // per-coordinate std added to every reactor

  int dims() const { return 2 * joints; }
  void validate() const;
};

// Limb offsets from the root in the body frame; fixed lengths.
std::vector<std::pair<double, double>> limb_offsets(int joints);

// Noiseless reaction rule: y-reflect the previous agent, delay it by `delay`
// frames (holding the first pose), then shift by the offset.
MotionSequence reaction_oracle(const MotionSequence& agent, const ToyDataConfig& config);

// Initiator motion for a class, parameterized by a per-scene random draw.
MotionSequence synthesize_initiator(TrajectoryClass cls, std::uint64_t seed,
                                    const ToyDataConfig& config);

// Scene i uses the stream (seed, i), so generation order does not matter.
std::vector<Scene> synthesize_dataset(int n_scenes, int n_agents, std::uint64_t seed,
                                      const ToyDataConfig& config);

// Bone lengths (root to each limb) per frame: frames x (joints - 1).
Mat bone_lengths(const MotionSequence& m);

struct Dataset {
  std::vector<Scene> scenes;
  int frames = 0;
  int dims = 0;
  int n_agents = 0;
  RowVec mean;  // per-dimension statistics over every agent and frame
  RowVec std;

  static Dataset from_scenes(std::vector<Scene> scenes);
  void compute_statistics();

  Mat normalize(const MotionSequence& m) const;
  MotionSequence denormalize(const Mat& m) const;
};

// "UMFD" file: magic, u32 version, u32 scenes, agents, frames, dims,
// f32 mean[dims], f32 std[dims], f32 frames per agent per scene (row-major),
// u16 labels[scenes].
void save_dataset(const Dataset& data, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);
std::vector<unsigned char> encode_dataset(const Dataset& data, const char magic[4]);
Dataset decode_dataset(std::vector<unsigned char> bytes, const char magic[4]);

// Train/validation split by hashing (seed, scene index). Disjoint and exhaustive.
bool is_validation_scene(std::uint64_t seed, std::size_t index, double val_fraction);

}  // namespace umf
