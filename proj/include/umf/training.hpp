#pragma once

#include "umf/autograd.hpp"
#include "umf/binary_io.hpp"
#include "umf/context_adapter.hpp"
#include "umf/motion_vae.hpp"
#include "umf/nn.hpp"
#include "umf/rng.hpp"
#include "umf/schedule.hpp"
#include "umf/toy_data.hpp"
#include "umf/velocity_model.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace umf {

// How pflow training picks (stage, time): a uniform stage then a uniform local
// time, or a uniform global time with the stage drawn among windows containing it.
enum class StageSampling { UniformStage, UniformTime };

std::string to_string(StageSampling s);
StageSampling stage_sampling_from_string(const std::string& s);

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  int total_steps = 1;  // horizon of the cosine decay
};

// AdamW over one or more parameter stores, reading their grad buffers.
class AdamW {
 public:
  AdamW(std::vector<nn::ParamStore*> stores, AdamWConfig config);

  // Cosine-decayed rate: lr * (1 + cos(pi * step / total)) / 2.
  double lr_at(int step) const;
  // Applies one update; returns false (and counts a skip) if any gradient is non-finite.
  bool step(int step_index);
  int skipped() const { return skipped_; }
  int updates() const { return updates_; }

  void save(io::ByteWriter& w) const;
  void load(io::ByteReader& r);

 private:
  std::vector<nn::ParamStore*> stores_;
  AdamWConfig config_;
  std::vector<std::vector<Mat>> m_, v_;
  int updates_ = 0;
  int skipped_ = 0;
};

// Training targets for the velocity net, one entry per sample.
struct FlowBatch {
  std::vector<Mat> points;
  std::vector<Mat> targets;
  std::vector<double> times;
  std::vector<int> labels;
  std::vector<int> stages;
};

// Per sample, in this draw order: stage, local time (or global time), noise at the
// stage resolution. Latents are at full resolution.
FlowBatch make_pflow_batch(const std::vector<Mat>& z1, const std::vector<int>& labels,
                           const PyramidSchedule& schedule, Rng& rng, StageSampling mode);

// Mean over samples of each sample's mean squared velocity error.
ag::Var flow_regression_loss(nn::Binder& b, const VelocityNet& net, const FlowBatch& batch);

ag::Var pflow_loss(nn::Binder& b, const VelocityNet& net, const std::vector<Mat>& z1,
                   const std::vector<int>& labels, const PyramidSchedule& schedule, Rng& rng,
                   StageSampling mode);

struct SFlowLoss {
  ag::Var total, trans, recon;
};

// `context` stacks the per-sample contexts ((batch * p) x r) and may carry gradients
// back into the adapter. Draws per sample: reaction-path time, context-path time;
// then the noise for the context path.
SFlowLoss sflow_loss(nn::Binder& b, const VelocityNet& net, ag::Var context,
                     const std::vector<Mat>& reactions, const std::vector<int>& labels, Rng& rng,
                     double lambda_recon);

struct TrainConfig {
  double lr = 1e-4;
  double weight_decay = 0.0;
  int steps = 1000;
  int batch_size = 64;
  double lambda_recon = 1.0;
  double lambda_kl = 1e-4;
  std::uint64_t seed = 0;
  StageSampling stage_sampling = StageSampling::UniformStage;
  int state_every = 0;  // also write the resume state every n steps (0: only at the end)
  int stop_after = -1;  // stop early (after this many steps) leaving a resume state

  void validate() const;
};

// Where a stage writes. Empty paths are skipped.
struct TrainOutputs {
  std::filesystem::path checkpoint;
  std::filesystem::path loss_csv;
  std::filesystem::path state;  // resume state; picked up automatically if present
};

struct TrainLog {
  std::vector<std::string> columns;  // after "step" and "lr"
  std::vector<int> steps;
  std::vector<double> lrs;
  std::vector<std::vector<double>> values;
  int skipped = 0;
  bool completed = false;

  std::string csv() const;
};

// Standardized encoder-mean latents per scene and agent.
struct LatentScenes {
  std::vector<std::vector<Mat>> latents;
  std::vector<int> labels;
};

// Fits per-channel latent statistics from encoder means over every agent.
void fit_latent_stats(MotionVae& vae, const Dataset& data);
LatentScenes encode_latents(const MotionVae& vae, const Dataset& data);

MotionVae train_vae(const Dataset& train, const MotionVaeConfig& config, const TrainConfig& tc,
                    const TrainOutputs& out, TrainLog* log = nullptr);

VelocityNet train_pflow(const LatentScenes& data, const VelocityNetConfig& config,
                        const PyramidSchedule& schedule, const TrainConfig& tc,
                        const TrainOutputs& out, TrainLog* log = nullptr);

struct SFlowModel {
  VelocityNet net;
  ContextAdapter adapter;
  double lambda_recon = 1.0;
};

// Each sample draws a scene and a target agent i >= 2; agents 1..i-1 form the context.
SFlowModel train_sflow(const LatentScenes& data, const VelocityNetConfig& config,
                       const ContextAdapterConfig& adapter_config, const TrainConfig& tc,
                       const TrainOutputs& out, TrainLog* log = nullptr);

// Checkpoint sections written by the stages above.
CheckpointSection pflow_section(const VelocityNet& net, const PyramidSchedule& schedule);
VelocityNet pflow_from_checkpoint(const Checkpoint& ck, PyramidSchedule* schedule = nullptr);
Checkpoint sflow_checkpoint(const SFlowModel& model);
SFlowModel sflow_from_checkpoint(const Checkpoint& ck);

}  // namespace umf
