#pragma once

#include "umf/context_adapter.hpp"
#include "umf/evaluation.hpp"
#include "umf/motion_vae.hpp"
#include "umf/schedule.hpp"
#include "umf/toy_data.hpp"
#include "umf/training.hpp"
#include "umf/velocity_model.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace umf {

// Every tunable of a run in one document. Widths shared between stages (frames,
// dims, latent length and width, class count) live in one place and are copied
// into the stage configs by the accessors below.
struct RunConfig {
  struct Data {
    ToyDataConfig toy;
    int scenes = 2000;
    int agents = 4;
    double val_fraction = 0.2;
    std::uint64_t seed = 1;
  } data;

  MotionVaeConfig vae;  // frames and dims come from data
  TrainConfig vae_train;

  VelocityNetConfig pflow;  // token_dim and num_classes derived
  int schedule_stages = 2;
  double schedule_s1 = 1.0 / 3.0;
  std::vector<int> schedule_steps{45, 5};  // execution order, coarsest stage first
  TrainConfig pflow_train;

  VelocityNetConfig sflow;
  ContextAdapterConfig adapter;  // token_dim derived
  TrainConfig sflow_train;

  struct Sample {
    int n_agents = 2;
    int scenes = 16;
    int reaction_steps = 10;
    double start_noise = 0.0;
    std::uint64_t seed = 7;
  } sample;

  struct Eval {
    Tolerances tolerances;
    std::uint64_t seed = 11;
    int jump_draws = 200000;
    std::vector<int> order_steps{8, 16, 32, 64, 128};
    int timing_runs = 20;
    int generation_scenes = 1000;
    int accumulation_agents = 4;
    int accumulation_scenes = 200;
    int gradient_cases = 3;
  } eval;

  struct Paths {
    std::string data = "run/data.umfd";
    std::string vae = "run/vae.umfw";
    std::string pflow = "run/pflow.umfw";
    std::string sflow = "run/sflow.umfw";
    std::string sflow_noise_free = "run/sflow_noise_free.umfw";
    std::string samples = "run/samples.umfs";
    std::string reports = "run/reports";
  } paths;

  int threads = 1;

  RunConfig();

  MotionVaeConfig vae_config() const;
  VelocityNetConfig pflow_config() const;
  VelocityNetConfig sflow_config() const;
  ContextAdapterConfig adapter_config() const;
  PyramidSchedule schedule() const;

  // Full document with every default written out.
  std::string to_json() const;
  // Starts from the defaults; unknown keys and type mismatches are rejected, and
  // every violation is listed in one InvalidArgument.
  static RunConfig from_json(const std::string& text, const std::vector<std::string>& overrides = {});
  // Collects every violated constraint; throws InvalidArgument when non-empty.
  void validate() const;
};

// Reads `path`, or $UMF_CONFIG when `path` is empty, or the defaults when both are
// absent. `overrides` are "dotted.key=value" with a JSON value (bare strings allowed).
RunConfig load_run_config(const std::filesystem::path& path,
                          const std::vector<std::string>& overrides = {});

// Documented key list: one line per leaf, "key = default".
std::string run_config_keys();

}  // namespace umf
