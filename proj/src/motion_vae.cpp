#include "umf/motion_vae.hpp"

#include "umf/errors.hpp"

#include <json.hpp>

#include <cmath>

namespace umf {

using nlohmann::json;

namespace {

std::vector<double> row_to_vector(const RowVec& r) {
  return std::vector<double>(r.data(), r.data() + r.size());
}

RowVec vector_to_row(const std::vector<double>& v) {
  RowVec r(static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) r(static_cast<Eigen::Index>(i)) = v[i];
  return r;
}

RowVec to_float_precision(RowVec r) {
  for (Eigen::Index i = 0; i < r.size(); ++i) r(i) = static_cast<float>(r(i));
  return r;
}

// Rows [s*frames + 1, (s+1)*frames) and their predecessors, for every sample.
std::pair<std::vector<int>, std::vector<int>> frame_pairs(int rows, int frames) {
  std::vector<int> next, prev;
  for (int s = 0; s < rows / frames; ++s)
    for (int f = 1; f < frames; ++f) {
      next.push_back(s * frames + f);
      prev.push_back(s * frames + f - 1);
    }
  return {next, prev};
}

// Root-relative limb displacement selectors: x (or y) of joint j minus x (or y) of joint 0.
Mat limb_selector(int dims, int axis) {
  const int joints = dims / 2;
  Mat s = Mat::Zero(dims, joints - 1);
  for (int j = 1; j < joints; ++j) {
    s(2 * j + axis, j - 1) = 1.0;
    s(axis, j - 1) = -1.0;
  }
  return s;
}

ag::Var bone_lengths_var(ag::Var raw, int dims) {
  auto& tape = *raw.tape;
  const ag::Var dx = ag::matmul(raw, tape.constant(limb_selector(dims, 0)));
  const ag::Var dy = ag::matmul(raw, tape.constant(limb_selector(dims, 1)));
  const ag::Var sq = ag::add(ag::mul(dx, dx), ag::mul(dy, dy));
  const RowVec ones = RowVec::Ones(sq.cols());
  return ag::sqrt(ag::affine_cols(sq, ones, RowVec::Constant(sq.cols(), 1e-10)));
}

}  // namespace

std::string MotionVaeConfig::to_json() const {
  return json{{"frames", frames},
              {"dims", dims},
              {"latent_tokens", latent_tokens},
              {"latent_dim", latent_dim},
              {"internal_dim", internal_dim},
              {"d_model", d_model},
              {"heads", heads},
              {"encoder_blocks", encoder_blocks},
              {"decoder_blocks", decoder_blocks},
              {"use_adapter", use_adapter},
              {"lambda_kl", lambda_kl}}
      .dump();
}

MotionVaeConfig MotionVaeConfig::from_json(const std::string& text) {
  const auto j = json::parse(text);
  MotionVaeConfig c;
  c.frames = j.at("frames");
  c.dims = j.at("dims");
  c.latent_tokens = j.at("latent_tokens");
  c.latent_dim = j.at("latent_dim");
  c.internal_dim = j.at("internal_dim");
  c.d_model = j.at("d_model");
  c.heads = j.at("heads");
  c.encoder_blocks = j.at("encoder_blocks");
  c.decoder_blocks = j.at("decoder_blocks");
  c.use_adapter = j.at("use_adapter");
  c.lambda_kl = j.at("lambda_kl");
  c.validate();
  return c;
}

void MotionVaeConfig::validate() const {
  UMF_REQUIRE(frames >= 2, "vae: frames must be >= 2");
  UMF_REQUIRE(dims >= 4 && dims % 2 == 0, "vae: dims must be an even number >= 4");
  UMF_REQUIRE(latent_tokens >= 1 && frames % latent_tokens == 0,
              "vae: latent_tokens must divide frames");
  UMF_REQUIRE(latent_dim >= 1 && internal_dim >= 1, "vae: latent widths must be >= 1");
  UMF_REQUIRE(d_model >= 1 && heads >= 1 && d_model % heads == 0,
              "vae: d_model must be divisible by heads");
  UMF_REQUIRE(encoder_blocks >= 0 && decoder_blocks >= 0, "vae: block counts must be >= 0");
  UMF_REQUIRE(lambda_kl >= 0.0, "vae: lambda_kl must be >= 0");
}

VaeLossValues VaeLossVars::values() const {
  return {ag::scalar(total), ag::scalar(recon), ag::scalar(kl), ag::scalar(geometric)};
}

MotionVae MotionVae::create(const MotionVaeConfig& config, std::uint64_t seed) {
  config.validate();
  MotionVae vae;
  vae.config_ = config;
  vae.data_mean_ = RowVec::Zero(config.dims);
  vae.data_std_ = RowVec::Ones(config.dims);
  vae.latent_mean_ = RowVec::Zero(config.latent_width());
  vae.latent_std_ = RowVec::Ones(config.latent_width());
  Rng rng(seed);
  auto& p = vae.params_;
  const int d = config.d_model;
  const int patch = config.patch_frames() * config.dims;
  const int w = config.latent_width();
  vae.enc_in_ = nn::Linear::create(p, "enc.in", patch, d, nn::Init::Xavier, rng);
  for (int i = 0; i < config.encoder_blocks; ++i)
    vae.enc_blocks_.push_back(nn::TransformerBlock::create(p, "enc.block" + std::to_string(i), d,
                                                           config.heads, false, rng));
  vae.enc_norm_ = nn::LayerNorm::create(p, "enc.norm", d);
  vae.enc_internal_ =
      nn::Linear::create(p, "enc.internal", d, config.internal_dim, nn::Init::Xavier, rng);
  const std::string head = config.use_adapter ? "adapter." : "enc.";
  vae.head_mu_ = nn::Linear::create(p, head + "mu", config.internal_dim, w, nn::Init::Xavier, rng);
  vae.head_logvar_ =
      nn::Linear::create(p, head + "logvar", config.internal_dim, w, nn::Init::Xavier, rng);
  if (config.use_adapter)
    vae.adapter_out_ =
        nn::Linear::create(p, "adapter.out", w, config.internal_dim, nn::Init::Xavier, rng);
  vae.dec_in_ = nn::Linear::create(p, "dec.in", config.internal_dim, d, nn::Init::Xavier, rng);
  for (int i = 0; i < config.decoder_blocks; ++i)
    vae.dec_blocks_.push_back(nn::TransformerBlock::create(p, "dec.block" + std::to_string(i), d,
                                                           config.heads, false, rng));
  vae.dec_norm_ = nn::LayerNorm::create(p, "dec.norm", d);
  vae.dec_out_ = nn::Linear::create(p, "dec.out", d, patch, nn::Init::Xavier, rng);
  return vae;
}

void MotionVae::set_data_stats(const RowVec& mean, const RowVec& std) {
  UMF_REQUIRE(mean.size() == config_.dims && std.size() == config_.dims,
              "vae: data statistics width mismatch");
  UMF_REQUIRE((std.array() > 0.0).all() && all_finite(mean), "vae: invalid data statistics");
  data_mean_ = to_float_precision(mean);
  data_std_ = to_float_precision(std);
}

void MotionVae::set_latent_stats(const RowVec& mean, const RowVec& std) {
  UMF_REQUIRE(mean.size() == config_.latent_width() && std.size() == config_.latent_width(),
              "vae: latent statistics width mismatch");
  UMF_REQUIRE((std.array() > 0.0).all() && all_finite(mean), "vae: invalid latent statistics");
  latent_mean_ = to_float_precision(mean);
  latent_std_ = to_float_precision(std);
}

Mat MotionVae::to_flow_latent(const Mat& mu) const {
  UMF_REQUIRE(mu.cols() == config_.latent_width(), "vae: latent width mismatch");
  return ((mu.rowwise() - latent_mean_).array().rowwise() / latent_std_.array()).matrix();
}

Mat MotionVae::from_flow_latent(const Mat& z) const {
  UMF_REQUIRE(z.cols() == config_.latent_width(), "vae: latent width mismatch");
  Mat out = (z.array().rowwise() * latent_std_.array()).matrix();
  out.rowwise() += latent_mean_;
  return out;
}

std::pair<ag::Var, ag::Var> MotionVae::encode(nn::Binder& b, ag::Var x_norm, int batch) const {
  const auto& c = config_;
  UMF_REQUIRE(batch >= 1, "vae: empty batch");
  UMF_REQUIRE(x_norm.rows() == static_cast<Eigen::Index>(batch) * c.frames && x_norm.cols() == c.dims,
              "vae: motion shape mismatch");
  auto& tape = b.tape();
  const int p = c.latent_tokens;
  ag::Var tokens = ag::reshape(x_norm, static_cast<Eigen::Index>(batch) * p,
                               static_cast<Eigen::Index>(c.patch_frames()) * c.dims);
  Mat pos = nn::positional_encoding(p, c.d_model).replicate(batch, 1);
  ag::Var h = ag::add(enc_in_(b, tokens), tape.constant(std::move(pos)));
  std::vector<ag::Segment> segments;
  for (int i = 0; i < batch; ++i) segments.push_back({i * p, p});
  for (const auto& blk : enc_blocks_) h = blk(b, h, segments);
  const ag::Var internal = enc_internal_(b, enc_norm_(b, h));
  const ag::Var mu = head_mu_(b, internal);
  const ag::Var logvar = ag::clamp(head_logvar_(b, internal), -10.0, 10.0);
  return {mu, logvar};
}

ag::Var MotionVae::decode(nn::Binder& b, ag::Var z, int batch) const {
  const auto& c = config_;
  UMF_REQUIRE(batch >= 1, "vae: empty batch");
  const int p = c.latent_tokens;
  UMF_REQUIRE(z.rows() == static_cast<Eigen::Index>(batch) * p && z.cols() == c.latent_width(),
              "vae: latent shape mismatch");
  auto& tape = b.tape();
  ag::Var internal = c.use_adapter ? adapter_out_(b, z) : z;
  Mat pos = nn::positional_encoding(p, c.d_model).replicate(batch, 1);
  ag::Var h = ag::add(dec_in_(b, internal), tape.constant(std::move(pos)));
  std::vector<ag::Segment> segments;
  for (int i = 0; i < batch; ++i) segments.push_back({i * p, p});
  for (const auto& blk : dec_blocks_) h = blk(b, h, segments);
  const ag::Var patches = dec_out_(b, dec_norm_(b, h));
  return ag::reshape(patches, static_cast<Eigen::Index>(batch) * c.frames, c.dims);
}

Mat MotionVae::normalize_batch(const std::vector<Mat>& motions) const {
  UMF_REQUIRE(!motions.empty(), "vae: empty batch");
  Mat x(static_cast<Eigen::Index>(motions.size()) * config_.frames, config_.dims);
  for (std::size_t i = 0; i < motions.size(); ++i) {
    const Mat& m = motions[i];
    UMF_REQUIRE(m.rows() == config_.frames && m.cols() == config_.dims,
                "vae: motion shape mismatch, expected " + std::to_string(config_.frames) + "x" +
                    std::to_string(config_.dims));
    UMF_REQUIRE(m.allFinite(), "vae: non-finite motion");
    x.middleRows(static_cast<Eigen::Index>(i) * config_.frames, config_.frames) =
        ((m.rowwise() - data_mean_).array().rowwise() / data_std_.array()).matrix();
  }
  return x;
}

std::pair<Mat, Mat> MotionVae::encode(const Mat& motion) const {
  return encode_batch({motion}).front();
}

std::vector<std::pair<Mat, Mat>> MotionVae::encode_batch(const std::vector<Mat>& motions) const {
  ag::Tape tape;
  nn::Binder b(tape, params_);
  const int batch = static_cast<int>(motions.size());
  auto [mu, logvar] = encode(b, tape.constant(normalize_batch(motions)), batch);
  if (!mu.value().allFinite() || !logvar.value().allFinite())
    throw NumericError("vae: non-finite encoder output");
  std::vector<std::pair<Mat, Mat>> out;
  const int p = config_.latent_tokens;
  for (int i = 0; i < batch; ++i)
    out.emplace_back(mu.value().middleRows(i * p, p), logvar.value().middleRows(i * p, p));
  return out;
}

Mat MotionVae::decode(const Mat& z) const { return decode_batch({z}).front(); }

std::vector<Mat> MotionVae::decode_batch(const std::vector<Mat>& zs) const {
  UMF_REQUIRE(!zs.empty(), "vae: empty batch");
  const int p = config_.latent_tokens;
  Mat stacked(static_cast<Eigen::Index>(zs.size()) * p, config_.latent_width());
  for (std::size_t i = 0; i < zs.size(); ++i) {
    UMF_REQUIRE(zs[i].rows() == p && zs[i].cols() == config_.latent_width(),
                "vae: latent shape mismatch");
    stacked.middleRows(static_cast<Eigen::Index>(i) * p, p) = zs[i];
  }
  ag::Tape tape;
  nn::Binder b(tape, params_);
  const Mat out = decode(b, tape.constant(std::move(stacked)), static_cast<int>(zs.size())).value();
  if (!out.allFinite()) throw NumericError("vae: non-finite decoder output");
  std::vector<Mat> result;
  for (std::size_t i = 0; i < zs.size(); ++i) {
    Mat m = (out.middleRows(static_cast<Eigen::Index>(i) * config_.frames, config_.frames)
                 .array()
                 .rowwise() *
             data_std_.array())
                .matrix();
    m.rowwise() += data_mean_;
    result.push_back(std::move(m));
  }
  return result;
}

CheckpointSection MotionVae::to_section(const std::string& name) const {
  const json meta{{"config", json::parse(config_.to_json())},
                  {"data_mean", row_to_vector(data_mean_)},
                  {"data_std", row_to_vector(data_std_)},
                  {"latent_mean", row_to_vector(latent_mean_)},
                  {"latent_std", row_to_vector(latent_std_)}};
  return section_from_params(name, meta.dump(), params_);
}

MotionVae MotionVae::from_section(const CheckpointSection& section) {
  json meta;
  try {
    meta = json::parse(section.meta);
  } catch (const json::exception& e) {
    throw FormatError(FormatErrorKind::Malformed, std::string("vae meta: ") + e.what());
  }
  MotionVae vae = create(MotionVaeConfig::from_json(meta.at("config").dump()), 0);
  params_from_section(section, vae.params_);
  vae.set_data_stats(vector_to_row(meta.at("data_mean")), vector_to_row(meta.at("data_std")));
  vae.set_latent_stats(vector_to_row(meta.at("latent_mean")),
                       vector_to_row(meta.at("latent_std")));
  return vae;
}

Mat reparameterize(const Mat& mu, const Mat& logvar, Rng& rng) {
  UMF_REQUIRE(same_shape(mu, logvar), "reparameterize: shape mismatch");
  const Mat xi = rng.normal_matrix(mu.rows(), mu.cols());
  return mu + ((0.5 * logvar.array()).exp() * xi.array()).matrix();
}

VaeLossVars vae_loss_terms(ag::Var recon_norm, ag::Var target_norm, ag::Var mu, ag::Var logvar,
                           const RowVec& data_mean, const RowVec& data_std, int frames,
                           double lambda_kl) {
  UMF_REQUIRE(lambda_kl >= 0.0, "vae loss: lambda_kl must be >= 0");
  UMF_REQUIRE(target_norm.rows() >= frames && target_norm.rows() % frames == 0,
              "vae loss: rows must be a multiple of frames");
  auto& tape = *recon_norm.tape;
  const int dims = static_cast<int>(target_norm.cols());

  const ag::Var recon = ag::mse(recon_norm, target_norm);

  // 0.5 * mean(mu^2 + exp(lv) - 1 - lv)
  const ag::Var kl_inner = ag::sub(ag::add(ag::mul(mu, mu), ag::exp(logvar)), logvar);
  const ag::Var kl = ag::scale(ag::sub(ag::mean(kl_inner), tape.constant(Mat::Ones(1, 1))), 0.5);

  const ag::Var raw_hat = ag::affine_cols(recon_norm, data_std, data_mean);
  const ag::Var raw = ag::affine_cols(target_norm, data_std, data_mean);
  auto [next, prev] = frame_pairs(static_cast<int>(raw.rows()), frames);
  const ag::Var vel_hat = ag::sub(ag::gather_rows(raw_hat, next), ag::gather_rows(raw_hat, prev));
  const ag::Var vel = ag::sub(ag::gather_rows(raw, next), ag::gather_rows(raw, prev));
  ag::Var geometric = ag::mse(vel_hat, vel);
  if (dims >= 4)
    geometric =
        ag::add(geometric, ag::mse(bone_lengths_var(raw_hat, dims), bone_lengths_var(raw, dims)));

  const ag::Var total = ag::add(ag::add(recon, geometric), ag::scale(kl, lambda_kl));
  return {total, recon, kl, geometric};
}

VaeLossVars vae_loss(nn::Binder& b, const MotionVae& vae, const std::vector<Mat>& batch, Rng& rng,
                     double lambda_kl) {
  UMF_REQUIRE(!batch.empty(), "vae loss: empty batch");
  auto& tape = b.tape();
  const int n = static_cast<int>(batch.size());
  const ag::Var target = tape.constant(vae.normalize_batch(batch));
  auto [mu, logvar] = vae.encode(b, target, n);
  const Mat xi = rng.normal_matrix(mu.rows(), mu.cols());
  const ag::Var z =
      ag::add(mu, ag::mul(ag::exp(ag::scale(logvar, 0.5)), tape.constant(xi)));
  const ag::Var recon = vae.decode(b, z, n);
  return vae_loss_terms(recon, target, mu, logvar, vae.data_mean(), vae.data_std(),
                        vae.config().frames, lambda_kl);
}

}  // namespace umf
