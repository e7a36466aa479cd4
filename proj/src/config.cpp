#include "umf/config.hpp"

#include "umf/errors.hpp"
#include "umf/binary_io.hpp"

#include <json.hpp>

#include <cstdlib>
#include <fstream>
#include <limits>
#include <sstream>

namespace umf {

using nlohmann::json;

namespace {

// Calls f(key, field) for every leaf; one list drives writing, reading and the key docs.
template <class C, class F>
void visit_fields(C& c, F&& f) {
  f("/data/frames", c.data.toy.frames);
  f("/data/joints", c.data.toy.joints);
  f("/data/delay", c.data.toy.delay);
  f("/data/offset_x", c.data.toy.offset_x);
  f("/data/offset_y", c.data.toy.offset_y);
  f("/data/noise", c.data.toy.noise);
  f("/data/scenes", c.data.scenes);
  f("/data/agents", c.data.agents);
  f("/data/val_fraction", c.data.val_fraction);
  f("/data/seed", c.data.seed);

  f("/vae/model/latent_tokens", c.vae.latent_tokens);
  f("/vae/model/latent_dim", c.vae.latent_dim);
  f("/vae/model/internal_dim", c.vae.internal_dim);
  f("/vae/model/d_model", c.vae.d_model);
  f("/vae/model/heads", c.vae.heads);
  f("/vae/model/encoder_blocks", c.vae.encoder_blocks);
  f("/vae/model/decoder_blocks", c.vae.decoder_blocks);
  f("/vae/model/use_adapter", c.vae.use_adapter);
  f("/vae/train/lr", c.vae_train.lr);
  f("/vae/train/weight_decay", c.vae_train.weight_decay);
  f("/vae/train/steps", c.vae_train.steps);
  f("/vae/train/batch_size", c.vae_train.batch_size);
  f("/vae/train/lambda_kl", c.vae_train.lambda_kl);
  f("/vae/train/seed", c.vae_train.seed);
  f("/vae/train/state_every", c.vae_train.state_every);
  f("/vae/train/stop_after", c.vae_train.stop_after);

  f("/pflow/model/d_model", c.pflow.d_model);
  f("/pflow/model/heads", c.pflow.heads);
  f("/pflow/model/blocks", c.pflow.blocks);
  f("/pflow/model/time_features", c.pflow.time_features);
  f("/pflow/model/zero_init_output", c.pflow.zero_init_output);
  f("/pflow/schedule/stages", c.schedule_stages);
  f("/pflow/schedule/s1", c.schedule_s1);
  f("/pflow/schedule/steps", c.schedule_steps);
  f("/pflow/train/lr", c.pflow_train.lr);
  f("/pflow/train/weight_decay", c.pflow_train.weight_decay);
  f("/pflow/train/steps", c.pflow_train.steps);
  f("/pflow/train/batch_size", c.pflow_train.batch_size);
  f("/pflow/train/seed", c.pflow_train.seed);
  f("/pflow/train/stage_sampling", c.pflow_train.stage_sampling);
  f("/pflow/train/state_every", c.pflow_train.state_every);
  f("/pflow/train/stop_after", c.pflow_train.stop_after);

  f("/sflow/model/d_model", c.sflow.d_model);
  f("/sflow/model/heads", c.sflow.heads);
  f("/sflow/model/blocks", c.sflow.blocks);
  f("/sflow/model/time_features", c.sflow.time_features);
  f("/sflow/model/zero_init_output", c.sflow.zero_init_output);
  f("/sflow/adapter/heads", c.adapter.heads);
  f("/sflow/adapter/blocks", c.adapter.blocks);
  f("/sflow/adapter/max_agents", c.adapter.max_agents);
  f("/sflow/adapter/agent_ids", c.adapter.agent_ids);
  f("/sflow/train/lr", c.sflow_train.lr);
  f("/sflow/train/weight_decay", c.sflow_train.weight_decay);
  f("/sflow/train/steps", c.sflow_train.steps);
  f("/sflow/train/batch_size", c.sflow_train.batch_size);
  f("/sflow/train/lambda_recon", c.sflow_train.lambda_recon);
  f("/sflow/train/seed", c.sflow_train.seed);
  f("/sflow/train/state_every", c.sflow_train.state_every);
  f("/sflow/train/stop_after", c.sflow_train.stop_after);

  f("/sample/n_agents", c.sample.n_agents);
  f("/sample/scenes", c.sample.scenes);
  f("/sample/reaction_steps", c.sample.reaction_steps);
  f("/sample/start_noise", c.sample.start_noise);
  f("/sample/seed", c.sample.seed);

  auto& t = c.eval.tolerances;
  f("/eval/tolerances/jump_mean", t.jump_mean);
  f("/eval/tolerances/jump_variance", t.jump_variance);
  f("/eval/tolerances/jump_covariance", t.jump_covariance);
  f("/eval/tolerances/jump_control_variance", t.jump_control_variance);
  f("/eval/tolerances/order_slope_min", t.order_slope_min);
  f("/eval/tolerances/order_slope_max", t.order_slope_max);
  f("/eval/tolerances/flops_ratio_max", t.flops_ratio_max);
  f("/eval/tolerances/wallclock_rel", t.wallclock_rel);
  f("/eval/tolerances/vae_recon_fraction", t.vae_recon_fraction);
  f("/eval/tolerances/mmd_factor", t.mmd_factor);
  f("/eval/tolerances/sign_test_p", t.sign_test_p);
  f("/eval/tolerances/gradient_rel", t.gradient_rel);
  f("/eval/seed", c.eval.seed);
  f("/eval/jump_draws", c.eval.jump_draws);
  f("/eval/order_steps", c.eval.order_steps);
  f("/eval/timing_runs", c.eval.timing_runs);
  f("/eval/generation_scenes", c.eval.generation_scenes);
  f("/eval/accumulation_agents", c.eval.accumulation_agents);
  f("/eval/accumulation_scenes", c.eval.accumulation_scenes);
  f("/eval/gradient_cases", c.eval.gradient_cases);

  f("/paths/data", c.paths.data);
  f("/paths/vae", c.paths.vae);
  f("/paths/pflow", c.paths.pflow);
  f("/paths/sflow", c.paths.sflow);
  f("/paths/sflow_noise_free", c.paths.sflow_noise_free);
  f("/paths/samples", c.paths.samples);
  f("/paths/reports", c.paths.reports);

  f("/threads", c.threads);
}

std::string dotted(const std::string& pointer) {
  std::string out = pointer.substr(1);
  for (auto& ch : out)
    if (ch == '/') ch = '.';
  return out;
}

json to_value(const StageSampling& s) { return to_string(s); }
template <class T>
json to_value(const T& v) {
  return json(v);
}

// Type-checked reads; a failure returns the expected type name.
const char* read(const json& j, bool& out) {
  if (!j.is_boolean()) return "a boolean";
  out = j.get<bool>();
  return nullptr;
}
const char* read(const json& j, int& out) {
  if (!j.is_number_integer()) return "an integer";
  const auto v = j.get<std::int64_t>();
  if (j.is_number_unsigned() && j.get<std::uint64_t>() > std::numeric_limits<int>::max())
    return "an integer in int range";
  if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max())
    return "an integer in int range";
  out = static_cast<int>(v);
  return nullptr;
}
const char* read(const json& j, std::uint64_t& out) {
  if (!j.is_number_unsigned()) return "a non-negative integer";
  out = j.get<std::uint64_t>();
  return nullptr;
}
const char* read(const json& j, double& out) {
  if (!j.is_number()) return "a number";
  out = j.get<double>();
  return nullptr;
}
const char* read(const json& j, std::string& out) {
  if (!j.is_string()) return "a string";
  out = j.get<std::string>();
  return nullptr;
}
const char* read(const json& j, std::vector<int>& out) {
  if (!j.is_array()) return "an array of integers";
  std::vector<int> v;
  for (const auto& e : j) {
    int x = 0;
    if (read(e, x)) return "an array of integers";
    v.push_back(x);
  }
  out = std::move(v);
  return nullptr;
}
const char* read(const json& j, StageSampling& out) {
  if (!j.is_string()) return "\"uniform_stage\" or \"uniform_time\"";
  try {
    out = stage_sampling_from_string(j.get<std::string>());
  } catch (const InvalidArgument&) {
    return "\"uniform_stage\" or \"uniform_time\"";
  }
  return nullptr;
}

// Overlays `over` onto `base`, refusing keys the defaults do not have.
void merge_strict(json& base, const json& over, const std::string& prefix,
                  std::vector<std::string>& errors) {
  if (!over.is_object()) {
    errors.push_back((prefix.empty() ? std::string("document") : prefix) + ": expected an object");
    return;
  }
  for (auto it = over.begin(); it != over.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!base.contains(it.key())) {
      errors.push_back(key + ": unknown key");
      continue;
    }
    auto& slot = base[it.key()];
    if (slot.is_object())
      merge_strict(slot, it.value(), key, errors);
    else if (it.value().is_object())
      errors.push_back(key + ": expected a value, got an object");
    else
      slot = it.value();
  }
}

json parse_override_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::exception&) {
    return json(text);
  }
}

[[noreturn]] void fail(const std::vector<std::string>& errors) {
  std::string msg = "invalid config (" + std::to_string(errors.size()) + " problem" +
                    (errors.size() == 1 ? "" : "s") + "):";
  for (const auto& e : errors) msg += "\n  " + e;
  throw InvalidArgument(msg);
}

}  // namespace

RunConfig::RunConfig() {
  vae_train.lr = 1e-3;  // 1e-4 leaves reconstruction at ~14% of variance after 1500 steps
  vae_train.batch_size = 128;
  vae_train.steps = 1500;
  vae_train.seed = 1;
  pflow_train.lr = 1e-4;
  pflow_train.batch_size = 64;
  pflow_train.steps = 3000;
  pflow_train.seed = 2;
  sflow_train.lr = 1e-4;
  sflow_train.batch_size = 64;
  sflow_train.steps = 3000;
  sflow_train.seed = 3;
}

MotionVaeConfig RunConfig::vae_config() const {
  MotionVaeConfig c = vae;
  c.frames = data.toy.frames;
  c.dims = data.toy.dims();
  c.lambda_kl = vae_train.lambda_kl;
  return c;
}

VelocityNetConfig RunConfig::pflow_config() const {
  VelocityNetConfig c = pflow;
  c.token_dim = vae_config().latent_width();
  c.num_classes = kNumTrajectoryClasses;
  return c;
}

VelocityNetConfig RunConfig::sflow_config() const {
  VelocityNetConfig c = sflow;
  c.token_dim = vae_config().latent_width();
  c.num_classes = kNumTrajectoryClasses;
  return c;
}

ContextAdapterConfig RunConfig::adapter_config() const {
  ContextAdapterConfig c = adapter;
  c.token_dim = vae_config().latent_width();
  return c;
}

PyramidSchedule RunConfig::schedule() const {
  return PyramidSchedule::build(schedule_stages, vae.latent_tokens, schedule_steps, schedule_s1);
}

std::string RunConfig::to_json() const {
  json j = json::object();
  visit_fields(*this, [&](const char* key, const auto& field) {
    j[json::json_pointer(key)] = to_value(field);
  });
  return j.dump(2);
}

RunConfig RunConfig::from_json(const std::string& text, const std::vector<std::string>& overrides) {
  std::vector<std::string> errors;
  json doc = json::parse(RunConfig{}.to_json());
  if (!text.empty()) {
    json user;
    try {
      user = json::parse(text);
    } catch (const json::exception& e) {
      throw InvalidArgument(std::string("config is not valid JSON: ") + e.what());
    }
    merge_strict(doc, user, "", errors);
  }
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) {
      errors.push_back("override '" + o + "': expected key=value");
      continue;
    }
    json patch = parse_override_value(o.substr(eq + 1));
    const std::string key = o.substr(0, eq);
    std::string::size_type start = 0;
    std::vector<std::string> parts;
    while (true) {
      const auto dot = key.find('.', start);
      parts.push_back(key.substr(start, dot - start));
      if (dot == std::string::npos) break;
      start = dot + 1;
    }
    for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = json{{*it, patch}};
    merge_strict(doc, patch, "", errors);
  }

  RunConfig c;
  visit_fields(c, [&](const char* key, auto& field) {
    const auto& v = doc[json::json_pointer(key)];
    if (const char* expected = read(v, field))
      errors.push_back(dotted(key) + ": expected " + expected + ", got " + v.dump());
  });
  if (!errors.empty()) fail(errors);
  c.validate();
  return c;
}

void RunConfig::validate() const {
  std::vector<std::string> errors;
  auto check = [&](const char* key, auto&& fn) {
    try {
      fn();
    } catch (const InvalidArgument& e) {
      errors.push_back(std::string(key) + ": " + e.what());
    }
  };
  auto require = [&](bool ok, const char* key, const char* msg) {
    if (!ok) errors.push_back(std::string(key) + ": " + msg);
  };
  check("data", [&] { data.toy.validate(); });
  require(data.scenes >= 2, "data.scenes", "must be >= 2");
  require(data.agents >= 2, "data.agents", "must be >= 2 (the reaction stage needs pairs)");
  require(data.val_fraction > 0.0 && data.val_fraction < 1.0, "data.val_fraction",
          "must lie in (0, 1)");
  check("vae.model", [&] { vae_config().validate(); });
  check("pflow.model", [&] { pflow_config().validate(); });
  check("pflow.schedule", [&] { schedule(); });
  check("sflow.model", [&] { sflow_config().validate(); });
  check("sflow.adapter", [&] { adapter_config().validate(); });
  require(adapter.max_agents >= data.agents, "sflow.adapter.max_agents",
          "must be >= data.agents");
  require(adapter.max_agents >= eval.accumulation_agents, "sflow.adapter.max_agents",
          "must be >= eval.accumulation_agents");
  check("vae.train", [&] { vae_train.validate(); });
  check("pflow.train", [&] { pflow_train.validate(); });
  check("sflow.train", [&] { sflow_train.validate(); });
  require(sample.n_agents >= 1, "sample.n_agents", "must be >= 1");
  require(sample.n_agents <= adapter.max_agents, "sample.n_agents",
          "must be <= sflow.adapter.max_agents");
  require(sample.scenes >= 1, "sample.scenes", "must be >= 1");
  require(sample.reaction_steps >= 1, "sample.reaction_steps", "must be >= 1");
  require(sample.start_noise >= 0.0, "sample.start_noise", "must be >= 0");
  require(eval.jump_draws >= 10000, "eval.jump_draws", "must be >= 10000");
  require(eval.order_steps.size() >= 2, "eval.order_steps", "needs at least two entries");
  for (int m : eval.order_steps) require(m >= 1, "eval.order_steps", "entries must be >= 1");
  require(eval.timing_runs >= 1, "eval.timing_runs", "must be >= 1");
  require(eval.generation_scenes >= 2, "eval.generation_scenes", "must be >= 2");
  require(eval.accumulation_agents >= 2, "eval.accumulation_agents", "must be >= 2");
  require(eval.accumulation_scenes >= 1, "eval.accumulation_scenes", "must be >= 1");
  require(eval.gradient_cases >= 1, "eval.gradient_cases", "must be >= 1");
  require(eval.tolerances.order_slope_min <= eval.tolerances.order_slope_max,
          "eval.tolerances.order_slope_min", "must be <= order_slope_max");
  for (const auto* p : {&paths.data, &paths.vae, &paths.pflow, &paths.sflow,
                        &paths.sflow_noise_free, &paths.samples, &paths.reports})
    require(!p->empty(), "paths", "every path must be non-empty");
  require(threads >= 1, "threads", "must be >= 1");
  if (!errors.empty()) fail(errors);
}

RunConfig load_run_config(const std::filesystem::path& path,
                          const std::vector<std::string>& overrides) {
  std::filesystem::path p = path;
  if (p.empty())
    if (const char* env = std::getenv("UMF_CONFIG"); env && *env) p = env;
  std::string text;
  if (!p.empty()) {
    std::ifstream in(p);
    if (!in) throw MissingArtifact("config file not found: " + p.string());
    std::stringstream ss;
    ss << in.rdbuf();
    text = ss.str();
  }
  return RunConfig::from_json(text, overrides);
}

std::string run_config_keys() {
  const RunConfig c;
  std::string out;
  visit_fields(c, [&](const char* key, const auto& field) {
    out += dotted(key) + " = " + to_value(field).dump() + "\n";
  });
  return out;
}

}  // namespace umf
