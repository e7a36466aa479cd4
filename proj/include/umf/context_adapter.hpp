#pragma once

#include "umf/autograd.hpp"
#include "umf/nn.hpp"
#include "umf/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace umf {

struct ContextAdapterConfig {
  int token_dim = 16;   // works directly at the latent width
  int heads = 4;
  int blocks = 2;
  int max_agents = 8;   // size of the agent-id table
  bool agent_ids = true;

  std::string to_json() const;
  static ContextAdapterConfig from_json(const std::string& text);
  void validate() const;
};

// Encodes the latents of every previously generated agent into one context latent.
// Tokens of all agents attend jointly; agent ids are relative (0 = most recent) and,
// like the per-token position code, enter only the attention-branch input. Residual
// branches start at zero, so an untrained adapter returns the agent average.
class ContextAdapter {
 public:
  static ContextAdapter create(const ContextAdapterConfig& config, std::uint64_t seed);

  const ContextAdapterConfig& config() const { return config_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }

  // scenes[i] lists agent latents (each p x r) oldest first; returns stacked
  // contexts, (scenes * p) x r.
  ag::Var forward(nn::Binder& b, const std::vector<std::vector<Mat>>& scenes) const;

  Mat operator()(const std::vector<Mat>& agents) const;

 private:
  ContextAdapterConfig config_;
  nn::ParamStore params_;
  int agent_embedding_ = -1;
  std::vector<nn::TransformerBlock> blocks_;
};

}  // namespace umf
