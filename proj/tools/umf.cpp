// umf: synth -> train vae -> train pflow -> train sflow -> sample -> eval

#include "umf/binary_io.hpp"
#include "umf/checkpoint.hpp"
#include "umf/config.hpp"
#include "umf/errors.hpp"
#include "umf/evaluation.hpp"
#include "umf/sampling.hpp"
#include "umf/training.hpp"
#include "umf/verify.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace umf;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0, kExitValidation = 1, kExitRuntime = 2, kExitVerify = 3;

class VerificationFailed : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Materialized config and tool version next to every output.
void record_run(const fs::path& dir, const std::string& command, const RunConfig& cfg) {
  const fs::path d = dir.empty() ? fs::path(".") : dir;
  fs::create_directories(d);
  io::write_text_atomic(d / (command + ".config.json"), cfg.to_json() + "\n");
  io::write_text_atomic(d / "VERSION", std::string("umf ") + UMF_VERSION + "\n");
}

fs::path with_suffix(const std::string& path, const std::string& suffix) { return path + suffix; }

std::pair<Dataset, Dataset> split(const Dataset& all, const RunConfig& cfg) {
  std::vector<Scene> train, val;
  for (std::size_t i = 0; i < all.scenes.size(); ++i)
    (is_validation_scene(cfg.data.seed, i, cfg.data.val_fraction) ? val : train)
        .push_back(all.scenes[i]);
  UMF_REQUIRE(!train.empty() && !val.empty(), "data split left one side empty");
  return {Dataset::from_scenes(std::move(train)), Dataset::from_scenes(std::move(val))};
}

Dataset require_dataset(const RunConfig& cfg) {
  if (!fs::exists(cfg.paths.data))
    throw MissingArtifact("missing dataset: " + cfg.paths.data + " (run `umf synth`)");
  return load_dataset(cfg.paths.data);
}

MotionVae require_vae(const RunConfig& cfg) {
  if (!fs::exists(cfg.paths.vae))
    throw MissingArtifact("missing checkpoint: " + cfg.paths.vae + " (run `umf train vae`)");
  return MotionVae::from_section(Checkpoint::load(cfg.paths.vae).section("vae"));
}

Pipeline require_pipeline(const RunConfig& cfg, const std::string& sflow_path) {
  auto p = load_pipeline(cfg.paths.vae, cfg.paths.pflow, sflow_path);
  p.reaction_steps = cfg.sample.reaction_steps;
  p.start_noise = cfg.sample.start_noise;
  return p;
}

// Loss curves from the CSV the training loop writes (full history across resumes).
std::vector<Series> loss_series(const fs::path& csv) {
  std::ifstream in(csv);
  std::string line;
  if (!std::getline(in, line)) return {};
  std::vector<std::string> cols;
  std::stringstream hs(line);
  for (std::string c; std::getline(hs, c, ',');) cols.push_back(c);
  std::vector<Series> out;
  for (std::size_t i = 2; i < cols.size(); ++i) out.push_back({cols[i], {}, {}});
  while (std::getline(in, line)) {
    std::stringstream ls(line);
    std::string cell;
    std::getline(ls, cell, ',');
    const double step = std::stod(cell);
    std::getline(ls, cell, ',');
    for (auto& s : out) {
      std::getline(ls, cell, ',');
      s.x.push_back(step);
      s.y.push_back(std::stod(cell));
    }
  }
  return out;
}

void finish_training(const std::string& stage, const std::string& ckpt, const TrainLog& log) {
  const auto csv = with_suffix(ckpt, ".loss.csv");
  io::write_text_atomic(with_suffix(ckpt, ".loss.svg"),
                        svg_plot(stage + " training loss", "step", "loss", loss_series(csv)));
  if (!log.completed) {
    std::printf("%s: stopped early at step %d; state kept for resume\n", stage.c_str(),
                log.steps.empty() ? 0 : log.steps.back() + 1);
    return;
  }
  std::printf("%s: done", stage.c_str());
  if (!log.values.empty())
    for (std::size_t c = 0; c < log.columns.size(); ++c)
      std::printf(" %s=%.6g", log.columns[c].c_str(), log.values.back()[c]);
  std::printf(" skipped=%d -> %s\n", log.skipped, ckpt.c_str());
}

TrainOutputs outputs_for(const std::string& ckpt) {
  return {ckpt, with_suffix(ckpt, ".loss.csv"), with_suffix(ckpt, ".state")};
}

// ---------------------------------------------------------------------------

int cmd_synth(const RunConfig& cfg) {
  auto scenes = synthesize_dataset(cfg.data.scenes, cfg.data.agents, cfg.data.seed, cfg.data.toy);
  const auto data = Dataset::from_scenes(std::move(scenes));
  record_run(fs::path(cfg.paths.data).parent_path(), "synth", cfg);
  save_dataset(data, cfg.paths.data);
  std::printf("synth: %zu scenes x %d agents x %d frames -> %s\n", data.scenes.size(),
              data.n_agents, data.frames, cfg.paths.data.c_str());
  return kExitOk;
}

int cmd_train(const RunConfig& cfg, const std::string& stage, bool noise_free) {
  const auto [train, val] = split(require_dataset(cfg), cfg);
  if (stage == "vae") {
    record_run(fs::path(cfg.paths.vae).parent_path(), "train_vae", cfg);
    TrainLog log;
    train_vae(train, cfg.vae_config(), cfg.vae_train, outputs_for(cfg.paths.vae), &log);
    finish_training("vae", cfg.paths.vae, log);
    return kExitOk;
  }
  const auto vae = require_vae(cfg);
  UMF_REQUIRE(vae.config().to_json() == cfg.vae_config().to_json(),
              "the VAE checkpoint was trained with a different vae config");
  const auto latents = encode_latents(vae, train);
  if (stage == "pflow") {
    record_run(fs::path(cfg.paths.pflow).parent_path(), "train_pflow", cfg);
    TrainLog log;
    train_pflow(latents, cfg.pflow_config(), cfg.schedule(), cfg.pflow_train,
                outputs_for(cfg.paths.pflow), &log);
    finish_training("pflow", cfg.paths.pflow, log);
    return kExitOk;
  }
  // sflow
  TrainConfig tc = cfg.sflow_train;
  if (noise_free) tc.lambda_recon = 0.0;
  const std::string& path = noise_free ? cfg.paths.sflow_noise_free : cfg.paths.sflow;
  record_run(fs::path(path).parent_path(), noise_free ? "train_sflow_noise_free" : "train_sflow",
             cfg);
  TrainLog log;
  train_sflow(latents, cfg.sflow_config(), cfg.adapter_config(), tc, outputs_for(path), &log);
  finish_training(noise_free ? "sflow (noise-free)" : "sflow", path, log);
  return kExitOk;
}

int cmd_sample(const RunConfig& cfg) {
  const auto models = require_pipeline(cfg, cfg.paths.sflow);
  const int n = cfg.sample.scenes;
  std::vector<Scene> scenes(n);
  std::vector<SceneAudit> audits(n);
  parallel_for(n, cfg.threads, [&](int i) {
    Rng rng = scene_rng(cfg.sample.seed, static_cast<std::uint64_t>(i));
    const Condition cond{rng.uniform_int(kNumTrajectoryClasses)};
    auto g = generate_scene(models, cfg.sample.n_agents, cond, rng);
    scenes[i] = Scene{std::move(g.motions), cond.label};
    audits[i] = std::move(g.audit);
  });
  SampleMeta meta;
  meta.seed = cfg.sample.seed;
  meta.n_agents = cfg.sample.n_agents;
  meta.prior_steps = cfg.schedule_steps;
  meta.reaction_steps = cfg.sample.reaction_steps;
  meta.vae_hash = io::file_hash(cfg.paths.vae);
  meta.pflow_hash = io::file_hash(cfg.paths.pflow);
  meta.sflow_hash = io::file_hash(cfg.paths.sflow);
  record_run(fs::path(cfg.paths.samples).parent_path(), "sample", cfg);
  save_samples(cfg.paths.samples, scenes, meta);
  std::string audit;
  int sflow_calls = 0;
  for (int i = 0; i < n; ++i) {
    audit += json{{"scene", i},
                  {"label", scenes[i].label},
                  {"pflow_calls", audits[i].pflow_calls},
                  {"sflow_calls", audits[i].sflow_calls},
                  {"context_sizes", audits[i].context_sizes}}
                 .dump() +
             "\n";
    sflow_calls += audits[i].sflow_calls;
  }
  io::write_text_atomic(with_suffix(cfg.paths.samples, ".audit.jsonl"), audit);
  std::printf("sample: %d scenes x %d agents, %d S-Flow calls -> %s\n", n, cfg.sample.n_agents,
              sflow_calls, cfg.paths.samples.c_str());
  return kExitOk;
}

void emit(const EvalReport& r, const fs::path& dir) {
  r.write(dir);
  std::fputs(r.text().c_str(), stdout);
}

// Unseen real scenes: held-out, split A, split B, n each.
std::array<std::vector<Scene>, 3> real_sets(const RunConfig& cfg, int n, int agents) {
  const std::uint64_t seed = Rng::derive(cfg.eval.seed, {0x4ea1}).next_u64();
  auto all = synthesize_dataset(3 * n, agents, seed, cfg.data.toy);
  std::array<std::vector<Scene>, 3> out;
  for (int i = 0; i < 3 * n; ++i) out[i / n].push_back(std::move(all[i]));
  return out;
}

EvalReport eval_one(const RunConfig& cfg, const std::string& name) {
  const auto& tol = cfg.eval.tolerances;
  if (name == "jump") {
    const auto schedule = cfg.schedule();
    UMF_REQUIRE(schedule.stages() >= 2, "eval jump: the schedule has a single stage");
    Rng rng = Rng::derive(cfg.eval.seed, {0x1ee});
    const Mat z1 = rng.normal_matrix(schedule.base_length(), cfg.vae_config().latent_width());
    return jump_continuity_report(z1, schedule, cfg.eval.jump_draws, cfg.eval.seed, tol);
  }
  if (name == "order") return solver_order_report(cfg.eval.order_steps, tol);
  if (name == "flops")
    return flops_ratio_report(cfg.schedule(), cfg.pflow_config(), cfg.eval.timing_runs,
                              cfg.eval.seed, tol);
  if (name == "vae") {
    const auto [train, val] = split(require_dataset(cfg), cfg);
    auto r = vae_quality_report(require_vae(cfg), val, tol);
    r.inputs.push_back({"split", "validation"});
    r.inputs.push_back({"scenes", std::to_string(val.scenes.size())});
    const auto csv = with_suffix(cfg.paths.vae, ".loss.csv");
    for (const auto& s : loss_series(csv))
      if (s.name == "kl" && !s.y.empty())
        r.metrics.push_back(Metric::within("training_kl_min",
                                           *std::min_element(s.y.begin(), s.y.end()), 0.0, 1e300,
                                           static_cast<std::int64_t>(s.y.size())));
    return r;
  }
  if (name == "generation") {
    const auto models = require_pipeline(cfg, cfg.paths.sflow);
    const int n = cfg.eval.generation_scenes;
    std::vector<Scene> gen(n);
    parallel_for(n, cfg.threads, [&](int i) {
      Rng rng = scene_rng(cfg.eval.seed, static_cast<std::uint64_t>(i));
      const Condition cond{rng.uniform_int(kNumTrajectoryClasses)};
      gen[i] = Scene{generate_scene(models, 2, cond, rng).motions, cond.label};
    });
    const auto real = real_sets(cfg, n, 2);
    // Split B through the autoencoder: the floor for anything decoded by it.
    std::vector<Scene> recon(real[2].size());
    parallel_for(n, cfg.threads, [&](int i) {
      std::vector<Mat> means;
      for (auto& [mu, logvar] : models.vae.encode_batch(real[2][i].agents)) means.push_back(mu);
      recon[i] = Scene{models.vae.decode_batch(means), real[2][i].label};
    });
    auto r = generation_report(gen, real[0], real[1], real[2], tol, &recon);
    r.inputs.push_back({"seed", std::to_string(cfg.eval.seed)});
    return r;
  }
  if (name == "accumulation") {
    const auto semi = require_pipeline(cfg, cfg.paths.sflow);
    const auto noise_free = require_pipeline(cfg, cfg.paths.sflow_noise_free);
    const auto res = run_accumulation(semi, noise_free, cfg.eval.accumulation_agents,
                                      cfg.eval.accumulation_scenes, cfg.eval.seed, cfg.data.toy,
                                      cfg.threads);
    const auto truth = real_sets(cfg, cfg.eval.accumulation_scenes, cfg.eval.accumulation_agents);
    return error_accumulation_report(res, tol, &truth[0]);
  }
  throw InvalidArgument("unknown report '" + name +
                        "' (expected vae, generation, accumulation, jump, order or flops)");
}

int cmd_eval(const RunConfig& cfg, const std::string& name, const std::string& out) {
  const fs::path dir = out.empty() ? fs::path(cfg.paths.reports) : fs::path(out);
  record_run(dir, "eval_" + name, cfg);
  const auto r = eval_one(cfg, name);
  emit(r, dir);
  if (name == "accumulation") {
    Series semi{"semi-noise", {}, {}}, nf{"noise-free", {}, {}};
    for (const auto& row : r.table) {
      semi.x.push_back(row[0]);
      semi.y.push_back(row[1]);
      nf.x.push_back(row[0]);
      nf.y.push_back(row[4]);
    }
    io::write_text_atomic(dir / "error_accumulation.svg",
                          svg_plot("Oracle deviation per agent", "agent", "RMS deviation", {semi, nf}));
  }
  return kExitOk;
}

int cmd_verify(const RunConfig& cfg, const std::string& out) {
  const fs::path dir = out.empty() ? fs::path(cfg.paths.reports) / "verify" : fs::path(out);
  record_run(dir, "verify", cfg);
  const auto reports = run_verification(cfg.eval.tolerances, cfg.eval.seed, cfg.eval.jump_draws,
                                        cfg.eval.order_steps, cfg.eval.gradient_cases);
  bool ok = true;
  for (const auto& r : reports) {
    r.write(dir);
    std::printf("%-16s %s\n", r.name.c_str(), r.passed() ? "PASS" : "FAIL");
    if (!r.passed()) {
      std::fputs(r.text().c_str(), stdout);
      ok = false;
    }
  }
  if (!ok) throw VerificationFailed("verify: at least one suite failed");
  return kExitOk;
}

int cmd_bench(const RunConfig& cfg, const std::string& out) {
  const fs::path dir = out.empty() ? fs::path(cfg.paths.reports) / "bench" : fs::path(out);
  record_run(dir, "bench", cfg);
  emit(eval_one(cfg, "flops"), dir);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Unified motion flow: toy multi-agent motion generation"};
  app.set_version_flag("--version", std::string("umf ") + UMF_VERSION);
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path;
  std::vector<std::string> sets;
  int threads = 0;
  app.add_option("-c,--config", config_path, "JSON config (default: $UMF_CONFIG, else built-in)");
  app.add_option("--set", sets, "Override a config key, e.g. --set pflow.train.steps=500")
      ->expected(1)
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  app.add_option("--threads", threads, "Worker threads (overrides threads)")->check(CLI::PositiveNumber);

  auto* config_cmd = app.add_subcommand("config", "Print the materialized config");
  bool keys = false;
  config_cmd->add_flag("--keys", keys, "List every key with its default");

  auto* synth = app.add_subcommand("synth", "Synthesize the toy dataset");
  std::string synth_out;
  synth->add_option("--out", synth_out, "Dataset path (paths.data)");

  auto* train = app.add_subcommand("train", "Train one stage");
  std::string stage;
  bool noise_free = false;
  train->add_option("stage", stage, "vae, pflow or sflow")
      ->required()
      ->check(CLI::IsMember({"vae", "pflow", "sflow"}));
  train->add_flag("--noise-free", noise_free, "S-Flow without the reconstruction term");
  int steps = 0;
  train->add_option("--steps", steps, "Training steps for this stage")->check(CLI::PositiveNumber);

  auto* sample = app.add_subcommand("sample", "Generate multi-agent scenes");
  int n_agents = 0, scenes = 0;
  std::string sample_out;
  sample->add_option("--n-agents", n_agents, "Agents per scene (sample.n_agents)")->check(CLI::PositiveNumber);
  sample->add_option("--scenes", scenes, "Scenes to generate (sample.scenes)")->check(CLI::PositiveNumber);
  sample->add_option("--out", sample_out, "Sample file (paths.samples)");

  auto* eval = app.add_subcommand("eval", "Write one evaluation report");
  std::string report, eval_out;
  eval->add_option("report", report, "vae, generation, accumulation, jump, order or flops")->required();
  eval->add_option("--out", eval_out, "Report directory (paths.reports)");

  auto* verify = app.add_subcommand("verify", "Run the analytic property suites");
  std::string verify_out;
  verify->add_option("--out", verify_out, "Report directory");

  auto* bench = app.add_subcommand("bench", "FLOPs and wall-clock comparison");
  std::string bench_out;
  bench->add_option("--out", bench_out, "Report directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    // Flags mirror config keys and win over the file.
    if (threads > 0) sets.push_back("threads=" + std::to_string(threads));
    if (!synth_out.empty()) sets.push_back("paths.data=" + json(synth_out).dump());
    if (n_agents > 0) sets.push_back("sample.n_agents=" + std::to_string(n_agents));
    if (scenes > 0) sets.push_back("sample.scenes=" + std::to_string(scenes));
    if (!sample_out.empty()) sets.push_back("paths.samples=" + json(sample_out).dump());
    if (steps > 0) sets.push_back(stage + ".train.steps=" + std::to_string(steps));
    const RunConfig cfg = load_run_config(config_path, sets);

    if (*config_cmd) {
      std::fputs(keys ? run_config_keys().c_str() : (cfg.to_json() + "\n").c_str(), stdout);
      return kExitOk;
    }
    if (*synth) return cmd_synth(cfg);
    if (*train) return cmd_train(cfg, stage, noise_free);
    if (*sample) return cmd_sample(cfg);
    if (*eval) return cmd_eval(cfg, report, eval_out);
    if (*verify) return cmd_verify(cfg, verify_out);
    if (*bench) return cmd_bench(cfg, bench_out);
  } catch (const InvalidArgument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitValidation;
  } catch (const VerificationFailed& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return kExitVerify;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return kExitValidation;
}
