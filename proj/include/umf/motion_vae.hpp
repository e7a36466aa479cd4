#pragma once

#include "umf/autograd.hpp"
#include "umf/checkpoint.hpp"
#include "umf/nn.hpp"
#include "umf/rng.hpp"
#include "umf/tensor.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace umf {

struct MotionVaeConfig {
  int frames = 64;
  int dims = 10;            // 2 * joints
  int latent_tokens = 16;   // p
  int latent_dim = 16;      // r, width the flows see
  int internal_dim = 64;    // r_big, token width inside the autoencoder
  int d_model = 64;
  int heads = 4;
  int encoder_blocks = 2;
  int decoder_blocks = 2;
  bool use_adapter = true;  // false: latents stay at internal_dim
  double lambda_kl = 1e-4;

  int joints() const { return dims / 2; }
  int patch_frames() const { return frames / latent_tokens; }
  int latent_width() const { return use_adapter ? latent_dim : internal_dim; }

  std::string to_json() const;
  static MotionVaeConfig from_json(const std::string& text);
  void validate() const;
};

struct VaeLossValues {
  double total = 0, recon = 0, kl = 0, geometric = 0;
};

struct VaeLossVars {
  ag::Var total, recon, kl, geometric;
  VaeLossValues values() const;
};

// Multi-token VAE. Motions enter in raw coordinates and are standardized with the
// stored data statistics; every frame patch of `patch_frames` frames becomes one token.
class MotionVae {
 public:
  static MotionVae create(const MotionVaeConfig& config, std::uint64_t seed);

  const MotionVaeConfig& config() const { return config_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }

  void set_data_stats(const RowVec& mean, const RowVec& std);
  const RowVec& data_mean() const { return data_mean_; }
  const RowVec& data_std() const { return data_std_; }

  // Per-channel statistics of encoder means, used to standardize flow latents.
  void set_latent_stats(const RowVec& mean, const RowVec& std);
  const RowVec& latent_mean() const { return latent_mean_; }
  const RowVec& latent_std() const { return latent_std_; }
  Mat to_flow_latent(const Mat& mu) const;
  Mat from_flow_latent(const Mat& z) const;

  // Tape-level passes on stacked samples. `x_norm` is (batch * frames) x dims in
  // standardized units; latents are (batch * p) x width.
  std::pair<ag::Var, ag::Var> encode(nn::Binder& b, ag::Var x_norm, int batch) const;
  ag::Var decode(nn::Binder& b, ag::Var z, int batch) const;

  // Stacks raw motions into standardized (batch * frames) x dims rows.
  Mat normalize_batch(const std::vector<Mat>& motions) const;

  // Inference on raw motion; log-variance is clamped to [-10, 10].
  std::pair<Mat, Mat> encode(const Mat& motion) const;
  std::vector<std::pair<Mat, Mat>> encode_batch(const std::vector<Mat>& motions) const;
  Mat decode(const Mat& z) const;
  std::vector<Mat> decode_batch(const std::vector<Mat>& zs) const;

  CheckpointSection to_section(const std::string& name = "vae") const;
  static MotionVae from_section(const CheckpointSection& section);

 private:
  MotionVaeConfig config_;
  nn::ParamStore params_;
  RowVec data_mean_, data_std_;
  RowVec latent_mean_, latent_std_;

  nn::Linear enc_in_;
  std::vector<nn::TransformerBlock> enc_blocks_;
  nn::LayerNorm enc_norm_;
  nn::Linear enc_internal_;
  nn::Linear head_mu_, head_logvar_;
  nn::Linear adapter_out_;
  nn::Linear dec_in_;
  std::vector<nn::TransformerBlock> dec_blocks_;
  nn::LayerNorm dec_norm_;
  nn::Linear dec_out_;
};

Mat reparameterize(const Mat& mu, const Mat& logvar, Rng& rng);

// The loss terms given a reconstruction. recon: MSE in standardized units;
// kl: Gaussian KL averaged per latent scalar; geometric: velocity MSE plus
// bone-length MSE measured in raw coordinates. total = recon + geometric + lambda_kl * kl.
VaeLossVars vae_loss_terms(ag::Var recon_norm, ag::Var target_norm, ag::Var mu, ag::Var logvar,
                           const RowVec& data_mean, const RowVec& data_std, int frames,
                           double lambda_kl);

// Full stochastic objective on a batch of raw motions.
VaeLossVars vae_loss(nn::Binder& b, const MotionVae& vae, const std::vector<Mat>& batch, Rng& rng,
                     double lambda_kl);

}  // namespace umf
