#pragma once

#include "umf/autograd.hpp"
#include "umf/nn.hpp"
#include "umf/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace umf {

struct VelocityNetConfig {
  int token_dim = 16;      // r
  int d_model = 64;
  int heads = 4;
  int blocks = 4;
  int num_classes = 4;
  int time_features = 64;  // width of the sinusoidal timestep features
  bool zero_init_output = true;

  std::string to_json() const;
  static VelocityNetConfig from_json(const std::string& text);
  void validate() const;
};

// Discrete interaction-class label standing in for a text prompt.
struct Condition {
  int label = 0;
};

// Time- and class-conditioned velocity field over variable-length token sequences.
// Layout per sample: [timestep token, condition token, x_1 .. x_L]; positions of
// the latent tokens are encoded as i / L so a token keeps its encoding when the
// sequence is at half resolution. The two conditioning tokens are dropped before
// the output projection.
class VelocityNet {
 public:
  static VelocityNet create(const VelocityNetConfig& config, std::uint64_t seed);

  const VelocityNetConfig& config() const { return config_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }

  // Batched forward on a tape. `x` stacks every sample's tokens; `lengths[i]` rows
  // belong to sample i. Returns velocities with the same layout.
  ag::Var forward(nn::Binder& b, ag::Var x, const std::vector<int>& lengths,
                  const std::vector<double>& times, const std::vector<int>& labels) const;

  // Inference conveniences (no gradient tracking).
  Mat operator()(const Mat& x, double t, Condition cond) const;
  std::vector<Mat> forward_batch(const std::vector<Mat>& xs, const std::vector<double>& times,
                                 const std::vector<int>& labels) const;

 private:
  VelocityNetConfig config_;
  nn::ParamStore params_;
  nn::Linear token_in_;
  nn::Linear time_fc1_, time_fc2_;
  int class_embedding_ = -1;
  std::vector<nn::TransformerBlock> blocks_;
  nn::LayerNorm final_norm_;
  nn::Linear token_out_;
};

// Analytic forward cost for `latent_tokens` latent tokens (multiply-add = 2 FLOPs):
// per block 4 n^2 d + 8 n d^2 (attention) + 16 n d^2 (feed-forward) on n = latent_tokens + 2,
// plus the token projections and the timestep MLP.
double flops_estimate(int latent_tokens, const VelocityNetConfig& config);

}  // namespace umf
