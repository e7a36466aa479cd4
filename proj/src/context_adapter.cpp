#include "umf/context_adapter.hpp"

#include "umf/errors.hpp"

#include <json.hpp>

namespace umf {

using nlohmann::json;

std::string ContextAdapterConfig::to_json() const {
  return json{{"token_dim", token_dim},
              {"heads", heads},
              {"blocks", blocks},
              {"max_agents", max_agents},
              {"agent_ids", agent_ids}}
      .dump();
}

ContextAdapterConfig ContextAdapterConfig::from_json(const std::string& text) {
  const auto j = json::parse(text);
  ContextAdapterConfig c;
  c.token_dim = j.at("token_dim");
  c.heads = j.at("heads");
  c.blocks = j.at("blocks");
  c.max_agents = j.at("max_agents");
  c.agent_ids = j.at("agent_ids");
  c.validate();
  return c;
}

void ContextAdapterConfig::validate() const {
  UMF_REQUIRE(token_dim >= 2 && token_dim % 2 == 0, "context adapter: token_dim must be even");
  UMF_REQUIRE(heads >= 1 && token_dim % heads == 0,
              "context adapter: token_dim must be divisible by heads");
  UMF_REQUIRE(blocks >= 0, "context adapter: blocks must be >= 0");
  UMF_REQUIRE(max_agents >= 1, "context adapter: max_agents must be >= 1");
}

ContextAdapter ContextAdapter::create(const ContextAdapterConfig& config, std::uint64_t seed) {
  config.validate();
  ContextAdapter a;
  a.config_ = config;
  Rng rng(seed);
  a.agent_embedding_ = a.params_.add(
      "agent_embedding", nn::init_matrix(config.max_agents, config.token_dim, nn::Init::Normal002, rng));
  for (int i = 0; i < config.blocks; ++i)
    a.blocks_.push_back(nn::TransformerBlock::create(a.params_, "block" + std::to_string(i),
                                                     config.token_dim, config.heads, true, rng));
  return a;
}

ag::Var ContextAdapter::forward(nn::Binder& b, const std::vector<std::vector<Mat>>& scenes) const {
  UMF_REQUIRE(!scenes.empty(), "context adapter: empty batch");
  const int r = config_.token_dim;
  const auto p = scenes.front().empty() ? 0 : scenes.front().front().rows();
  UMF_REQUIRE(p >= 1, "context adapter: every scene needs at least one agent");

  Eigen::Index total = 0;
  for (const auto& s : scenes) {
    UMF_REQUIRE(!s.empty(), "context adapter: every scene needs at least one agent");
    UMF_REQUIRE(static_cast<int>(s.size()) <= config_.max_agents,
                "context adapter: more agents than max_agents");
    for (const auto& z : s)
      UMF_REQUIRE(z.rows() == p && z.cols() == r, "context adapter: agent latent shape mismatch");
    total += static_cast<Eigen::Index>(s.size()) * p;
  }

  auto& tape = b.tape();
  Mat x(total, r);
  Mat pos(total, r);
  Mat pool = Mat::Zero(static_cast<Eigen::Index>(scenes.size()) * p, total);
  std::vector<int> ids;
  std::vector<ag::Segment> segments;
  const Mat pe = nn::positional_encoding(static_cast<int>(p), r);
  Eigen::Index off = 0;
  for (std::size_t si = 0; si < scenes.size(); ++si) {
    const auto& s = scenes[si];
    const int n = static_cast<int>(s.size());
    segments.push_back({static_cast<int>(off), static_cast<int>(n * p)});
    for (int a = 0; a < n; ++a) {
      x.middleRows(off, p) = s[a];
      pos.middleRows(off, p) = pe;
      for (Eigen::Index i = 0; i < p; ++i) {
        pool(static_cast<Eigen::Index>(si) * p + i, off + i) = 1.0 / n;
        ids.push_back(n - 1 - a);
      }
      off += p;
    }
  }

  ag::Var bias = tape.constant(std::move(pos));
  if (config_.agent_ids) bias = ag::add(bias, ag::gather_rows(b(agent_embedding_), std::move(ids)));
  ag::Var h = tape.constant(std::move(x));
  for (const auto& blk : blocks_) h = blk(b, h, segments, &bias);
  return ag::matmul(tape.constant(std::move(pool)), h);
}

Mat ContextAdapter::operator()(const std::vector<Mat>& agents) const {
  ag::Tape tape;
  nn::Binder b(tape, params_);
  Mat out = forward(b, {agents}).value();
  if (!out.allFinite()) throw NumericError("context adapter: non-finite output");
  return out;
}

}  // namespace umf
