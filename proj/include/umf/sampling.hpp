#pragma once

#include "umf/context_adapter.hpp"
#include "umf/motion_vae.hpp"
#include "umf/rng.hpp"
#include "umf/schedule.hpp"
#include "umf/tensor.hpp"
#include "umf/toy_data.hpp"
#include "umf/training.hpp"
#include "umf/velocity_model.hpp"

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace umf {

using Field = std::function<Mat(const Mat& x, double t)>;

// Explicit Euler on the uniform grid t_m = t_start + m (t_end - t_start) / steps.
// Throws NumericError naming the step if the field returns a non-finite value.
// `times` (optional) receives the grid points at which the field was evaluated.
Mat euler_solve(const Field& field, Mat x, double t_start, double t_end, int steps,
                std::vector<double>* times = nullptr);

// Velocity of stage k at global time t; the pyramid loop divides by the window
// width to integrate in global time.
using StageField = std::function<Mat(const Mat& x, double t_global, int stage)>;

struct PriorTrace {
  std::vector<double> times;  // every field evaluation, in order
  std::vector<int> stages;    // stage of each evaluation
  std::vector<Mat> stage_starts, stage_ends;  // execution order (stage K first)
};

// Noise at the coarsest resolution, one Euler solve per window, jump updates in between.
Mat sample_prior(const StageField& field, const PyramidSchedule& schedule, int width, Rng& rng,
                 PriorTrace* trace = nullptr);
Mat sample_prior(const VelocityNet& net, const PyramidSchedule& schedule, Condition cond, Rng& rng,
                 PriorTrace* trace = nullptr);

// Euler from x_start = C over [0, 1]. With start_noise > 0 the start is C plus that
// much Gaussian noise (drawn from `rng`); the default is the bare context.
Mat sample_reaction(const VelocityNet& net, const Mat& context, Condition cond, int steps,
                    Rng* rng = nullptr, double start_noise = 0.0, std::vector<Mat>* states = nullptr);

Mat build_context(const ContextAdapter& adapter, const std::vector<Mat>& generated);

struct Pipeline {
  MotionVae vae;
  VelocityNet pflow;
  PyramidSchedule schedule;
  SFlowModel sflow;
  int reaction_steps = 10;
  double start_noise = 0.0;
};

// Loads the three checkpoints; throws MissingArtifact naming the absent file.
Pipeline load_pipeline(const std::filesystem::path& vae, const std::filesystem::path& pflow,
                       const std::filesystem::path& sflow);

struct SceneAudit {
  int pflow_calls = 0;
  int sflow_calls = 0;
  std::vector<int> context_sizes;  // agents fed to the adapter per reaction
};

struct GeneratedScene {
  std::vector<Mat> latents;  // flow-space latents, generation order
  std::vector<MotionSequence> motions;
  SceneAudit audit;
};

// One prior sample then n_agents - 1 reactions, each from the context of every
// earlier agent; all latents are decoded at the end.
GeneratedScene generate_scene(const Pipeline& models, int n_agents, Condition cond, Rng& rng);

// Stream of scene `index` under `seed`, so scenes can be generated in any order.
Rng scene_rng(std::uint64_t seed, std::uint64_t index);

struct SampleMeta {
  std::uint64_t seed = 0;
  int n_agents = 0;
  std::vector<int> prior_steps;  // execution order
  int reaction_steps = 0;
  std::string vae_hash, pflow_hash, sflow_hash;

  std::string to_json() const;
  static SampleMeta from_json(const std::string& text);
};

// "UMFS" file: the dataset layout followed by the metadata JSON.
void save_samples(const std::filesystem::path& path, const std::vector<Scene>& scenes,
                  const SampleMeta& meta);
std::pair<std::vector<Scene>, SampleMeta> load_samples(const std::filesystem::path& path);

}  // namespace umf
