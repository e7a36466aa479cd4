#include "umf/velocity_model.hpp"

#include "umf/errors.hpp"

#include <json.hpp>

namespace umf {

using nlohmann::json;

std::string VelocityNetConfig::to_json() const {
  return json{{"token_dim", token_dim},       {"d_model", d_model},
              {"heads", heads},               {"blocks", blocks},
              {"num_classes", num_classes},   {"time_features", time_features},
              {"zero_init_output", zero_init_output}}
      .dump();
}

VelocityNetConfig VelocityNetConfig::from_json(const std::string& text) {
  const auto j = json::parse(text);
  VelocityNetConfig c;
  c.token_dim = j.at("token_dim");
  c.d_model = j.at("d_model");
  c.heads = j.at("heads");
  c.blocks = j.at("blocks");
  c.num_classes = j.at("num_classes");
  c.time_features = j.at("time_features");
  c.zero_init_output = j.at("zero_init_output");
  c.validate();
  return c;
}

void VelocityNetConfig::validate() const {
  UMF_REQUIRE(token_dim >= 1, "velocity net: token_dim must be >= 1");
  UMF_REQUIRE(d_model >= 1 && heads >= 1 && d_model % heads == 0,
              "velocity net: d_model must be divisible by heads");
  UMF_REQUIRE(blocks >= 0, "velocity net: blocks must be >= 0");
  UMF_REQUIRE(num_classes >= 1, "velocity net: num_classes must be >= 1");
  UMF_REQUIRE(time_features >= 2 && time_features % 2 == 0,
              "velocity net: time_features must be even");
}

VelocityNet VelocityNet::create(const VelocityNetConfig& config, std::uint64_t seed) {
  config.validate();
  VelocityNet net;
  net.config_ = config;
  Rng rng(seed);
  auto& p = net.params_;
  const int d = config.d_model;
  net.token_in_ = nn::Linear::create(p, "token_in", config.token_dim, d, nn::Init::Xavier, rng);
  net.time_fc1_ =
      nn::Linear::create(p, "time.fc1", config.time_features, d, nn::Init::Xavier, rng);
  net.time_fc2_ = nn::Linear::create(p, "time.fc2", d, d, nn::Init::Xavier, rng);
  net.class_embedding_ = p.add("class_embedding", rng.normal_matrix(config.num_classes, d));
  for (int i = 0; i < config.blocks; ++i)
    net.blocks_.push_back(nn::TransformerBlock::create(p, "block" + std::to_string(i), d,
                                                       config.heads, false, rng));
  net.final_norm_ = nn::LayerNorm::create(p, "final_norm", d);
  net.token_out_ = nn::Linear::create(p, "token_out", d, config.token_dim,
                                      config.zero_init_output ? nn::Init::Zero : nn::Init::Xavier,
                                      rng);
  return net;
}

ag::Var VelocityNet::forward(nn::Binder& b, ag::Var x, const std::vector<int>& lengths,
                             const std::vector<double>& times,
                             const std::vector<int>& labels) const {
  const int batch = static_cast<int>(lengths.size());
  UMF_REQUIRE(batch >= 1, "velocity net: empty batch");
  UMF_REQUIRE(static_cast<int>(times.size()) == batch && static_cast<int>(labels.size()) == batch,
              "velocity net: times/labels must match the batch");
  UMF_REQUIRE(x.cols() == config_.token_dim, "velocity net: token width mismatch");
  UMF_REQUIRE(x.value().allFinite(), "velocity net: non-finite input");
  int total = 0;
  for (int n : lengths) {
    UMF_REQUIRE(n >= 1, "velocity net: empty sequence");
    total += n;
  }
  UMF_REQUIRE(total == x.rows(), "velocity net: lengths do not cover the input rows");

  auto& tape = b.tape();
  const int d = config_.d_model;

  Mat pos(total, d);
  Mat time_feats(batch, config_.time_features);
  for (int i = 0, off = 0; i < batch; ++i) {
    UMF_REQUIRE(times[i] >= 0.0 && times[i] <= 1.0, "velocity net: t must lie in [0, 1]");
    UMF_REQUIRE(labels[i] >= 0 && labels[i] < config_.num_classes,
                "velocity net: unknown condition label " + std::to_string(labels[i]));
    pos.middleRows(off, lengths[i]) = nn::positional_encoding(lengths[i], d);
    time_feats.row(i) = nn::sinusoidal_features(times[i], config_.time_features);
    off += lengths[i];
  }

  ag::Var tokens = ag::add(token_in_(b, x), tape.constant(std::move(pos)));
  ag::Var time_tok = time_fc2_(b, ag::gelu(time_fc1_(b, tape.constant(std::move(time_feats)))));
  ag::Var cond_tok = ag::gather_rows(b(class_embedding_), labels);

  // Interleave to [t_i, c_i, tokens_i...] per sample.
  std::vector<int> order;
  std::vector<int> keep;
  std::vector<ag::Segment> segments;
  order.reserve(total + 2 * batch);
  for (int i = 0, off = 0; i < batch; ++i) {
    segments.push_back({static_cast<int>(order.size()), lengths[i] + 2});
    order.push_back(i);
    order.push_back(batch + i);
    for (int j = 0; j < lengths[i]; ++j) {
      keep.push_back(static_cast<int>(order.size()));
      order.push_back(2 * batch + off + j);
    }
    off += lengths[i];
  }
  ag::Var h = ag::gather_rows(ag::concat_rows({time_tok, cond_tok, tokens}), std::move(order));
  for (const auto& blk : blocks_) h = blk(b, h, segments);
  h = ag::gather_rows(final_norm_(b, h), std::move(keep));
  return token_out_(b, h);
}

Mat VelocityNet::operator()(const Mat& x, double t, Condition cond) const {
  return forward_batch({x}, {t}, {cond.label}).front();
}

std::vector<Mat> VelocityNet::forward_batch(const std::vector<Mat>& xs,
                                            const std::vector<double>& times,
                                            const std::vector<int>& labels) const {
  UMF_REQUIRE(!xs.empty(), "velocity net: empty batch");
  std::vector<int> lengths;
  Eigen::Index total = 0;
  for (const auto& x : xs) {
    lengths.push_back(static_cast<int>(x.rows()));
    total += x.rows();
  }
  Mat stacked(total, config_.token_dim);
  Eigen::Index off = 0;
  for (const auto& x : xs) {
    UMF_REQUIRE(x.cols() == config_.token_dim, "velocity net: token width mismatch");
    stacked.middleRows(off, x.rows()) = x;
    off += x.rows();
  }
  ag::Tape tape;
  nn::Binder b(tape, params_);
  const Mat out = forward(b, tape.constant(std::move(stacked)), lengths, times, labels).value();
  if (!out.allFinite()) throw NumericError("velocity net: non-finite output");
  std::vector<Mat> result;
  off = 0;
  for (int n : lengths) {
    result.emplace_back(out.middleRows(off, n));
    off += n;
  }
  return result;
}

double flops_estimate(int latent_tokens, const VelocityNetConfig& c) {
  const double n = latent_tokens + 2.0;
  const double L = latent_tokens;
  const double d = c.d_model;
  const double attn = 4.0 * n * n * d + 8.0 * n * d * d;
  const double ffn = 16.0 * n * d * d;
  const double proj = 2.0 * L * c.token_dim * d + 2.0 * L * d * c.token_dim;
  const double time_mlp = 2.0 * (c.time_features * d + d * d);
  return c.blocks * (attn + ffn) + proj + time_mlp;
}

}  // namespace umf
