// Acceptance run: one PASS/FAIL line per criterion A1..A10.
//
// A1-A4, A6 and A8 run in-process. A5, A7, A9 and A10 drive the umf tool in a
// work directory; the dataset and trained checkpoints are kept there and reused
// while the command line that produced them is unchanged (--fresh retrains).
// Evaluations always re-run.

#include "gradcheck.hpp"
#include "oracles.hpp"

#include "umf/binary_io.hpp"
#include "umf/config.hpp"
#include "umf/context_adapter.hpp"
#include "umf/evaluation.hpp"
#include "umf/motion_vae.hpp"
#include "umf/resampling.hpp"
#include "umf/rng.hpp"
#include "umf/schedule.hpp"
#include "umf/training.hpp"
#include "umf/velocity_model.hpp"
#include "umf/verify.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstring>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

namespace fs = std::filesystem;
using namespace umf;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

struct Outcome {
  std::string id;
  bool pass = false;
  bool blocking = true;
  std::string detail;
};

std::vector<Outcome> outcomes;
std::string transcript;  // every printed line, also written to <workdir>/results.txt
std::vector<std::string> known_failures;  // analysed and recorded; still printed as FAIL

bool is_known_failure(const std::string& id) {
  return std::find(known_failures.begin(), known_failures.end(), id) != known_failures.end();
}

void report(const std::string& id, bool pass, const std::string& detail, bool blocking = true) {
  blocking = blocking && !is_known_failure(id);
  outcomes.push_back({id, pass, blocking, detail});
  const char* verdict = pass ? (is_known_failure(id) ? "PASS (listed as known failure)" : "PASS")
                             : (is_known_failure(id) ? "FAIL (known failure)"
                                                     : (blocking ? "FAIL" : "FAIL (non-blocking)"));
  const std::string line = fmt("%-3s %s  ", id.c_str(), verdict) + detail + "\n";
  transcript += line;
  std::fputs(line.c_str(), stdout);
  std::fflush(stdout);
}

const Metric* find_metric(const EvalReport& r, const std::string& name) {
  for (const auto& m : r.metrics)
    if (m.name == name) return &m;
  return nullptr;
}

// ---------------------------------------------------------------------------
// Report CSVs written by the tool.

struct CsvMetric {
  double value = std::nan("");
  double ci_low = std::nan(""), ci_high = std::nan("");
  bool pass = false;
};

std::map<std::string, CsvMetric> read_report(const fs::path& csv) {
  std::map<std::string, CsvMetric> out;
  std::ifstream in(csv);
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line) && !line.empty()) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() < 9) continue;
    out[f[0]] = {std::stod(f[1]), std::stod(f[3]), std::stod(f[4]), f[8] == "1"};
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tool driver.

struct Tool {
  fs::path exe;
  bool fresh = false;
  bool invalidated = false;  // an upstream step ran, so cached ones below are stale

  int run(const fs::path& dir, const std::string& args, const std::string& log) const {
    fs::create_directories(dir);
    const std::string cmd = "cd '" + dir.string() + "' && '" + exe.string() + "' " + args +
                            " >> '" + log + "' 2>&1";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
  }

  // Runs `args` in `dir` unless `cache` is set and a stamp shows the same command
  // already completed there. Returns the wall time in seconds (0 for a cached
  // step), or -1 on error.
  double step(const fs::path& dir, const std::string& name, const std::string& args,
              bool cache = true) {
    const fs::path stamp = dir / "stamps" / name;
    const std::string want = args + "\n";
    if (cache && !fresh && !invalidated && fs::exists(stamp)) {
      std::ifstream in(stamp);
      std::stringstream ss;
      ss << in.rdbuf();
      if (ss.str() == want) return 0.0;
    }
    invalidated = true;
    fs::create_directories(stamp.parent_path());
    fs::remove(stamp);
    std::fprintf(stderr, "[acceptance] %s: umf %s\n", name.c_str(), args.c_str());
    const auto t0 = Clock::now();
    const int rc = run(dir, args, "log.txt");
    if (rc != 0) {
      std::fprintf(stderr, "[acceptance] %s exited %d (see %s)\n", name.c_str(), rc,
                   (dir / "log.txt").c_str());
      return -1.0;
    }
    std::ofstream(stamp) << want;
    return seconds_since(t0);
  }
};

std::map<std::string, std::string> hash_tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  if (!fs::exists(root)) return out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = io::file_hash(e.path());
  return out;
}

// ---------------------------------------------------------------------------

void a1_jump_continuity(const RunConfig& cfg) {
  const auto t0 = Clock::now();
  const auto schedule = cfg.schedule();
  Rng rng = Rng::derive(cfg.eval.seed, {0xa1});
  const Mat z1 = rng.normal_matrix(schedule.base_length(), cfg.vae_config().latent_width());
  const auto r = jump_continuity_report(z1, schedule, cfg.eval.jump_draws, cfg.eval.seed,
                                        cfg.eval.tolerances);
  const double secs = seconds_since(t0);
  double mean = 0, var = 0, cov = 0, control = 1e300;
  for (const auto& m : r.metrics) {
    const auto ends = [&](const char* s) {
      return m.name.size() >= std::strlen(s) &&
             m.name.compare(m.name.size() - std::strlen(s), std::string::npos, s) == 0;
    };
    if (m.name.find("control") != std::string::npos) control = std::min(control, m.value);
    else if (ends("mean_error")) mean = std::max(mean, m.value);
    else if (ends("covariance_error")) cov = std::max(cov, m.value);
    else if (ends("variance_error")) var = std::max(var, m.value);
  }
  const bool ok = r.passed() && secs < 60.0;
  report("A1", ok,
         fmt("jump continuity, %d draws: mean %.4f (<%.2g), var %.4f (<%.2g), cov %.4f (<%.2g); "
             "alpha/2 control var error %.3f (fails as expected: %s); %.1fs",
             cfg.eval.jump_draws, mean, cfg.eval.tolerances.jump_mean, var,
             cfg.eval.tolerances.jump_variance, cov, cfg.eval.tolerances.jump_covariance, control,
             control > cfg.eval.tolerances.jump_control_variance ? "yes" : "no", secs));
}

void a2_closed_forms() {
  double worst = 0.0;
  const Mat block = block_covariance(4);
  for (double s : {0.1, 1.0 / 3.0, 0.5, 0.9}) {
    const auto d = oracle::derive_jump(s);
    const auto jc = jump_coefficients(s);
    worst = std::max({worst, std::abs(chained_end(s) - d.window_end),
                      std::abs(jc.alpha - d.alpha), std::abs(jc.scale * (1 - chained_end(s)) - d.carried_std),
                      (block - d.corrective_cov).cwiseAbs().maxCoeff()});
  }
  report("A2", worst < 1e-12,
         fmt("window end, carried noise scale, alpha and corrective covariance vs covariance-matching oracle, "
             "s in {0.1,1/3,0.5,0.9}: max error %.2e (<1e-12)",
             worst));
}

void a3_single_stage(std::uint64_t seed) {
  const auto r = verify_single_stage(20, seed);
  const auto* t = find_metric(r, "training_mismatches");
  const auto* s = find_metric(r, "sampling_mismatches");
  report("A3", r.passed(),
         fmt("K=1 vs plain rectified flow on shared RNG, 20 cases: %g training and %g sampling "
             "mismatches (bitwise)",
             t ? t->value : std::nan(""), s ? s->value : std::nan("")));
}

void a4_solver_order(const RunConfig& cfg) {
  const auto r = solver_order_report(cfg.eval.order_steps, cfg.eval.tolerances);
  std::string d;
  for (const auto& m : r.metrics)
    if (m.kind != Metric::Kind::Info) d += (d.empty() ? "" : ", ") + m.name + fmt(" %.4g", m.value);
  report("A4", r.passed(), "Euler order on x'=-x and constant field: " + d);
}

void a6_flops(const RunConfig& cfg) {
  const auto r = flops_ratio_report(cfg.schedule(), cfg.pflow_config(), cfg.eval.timing_runs,
                                    cfg.eval.seed, cfg.eval.tolerances);
  auto v = [&](const char* n) {
    const auto* m = find_metric(r, n);
    return m ? m->value : std::nan("");
  };
  report("A6", r.passed(),
         fmt("FLOPs ratio %.4f (<%.2f), wall-clock ratio %.4f (within +-%.0f%%), K=1 ratio %.3f, "
             "%d timing runs",
             v("flops_ratio"), cfg.eval.tolerances.flops_ratio_max, v("wallclock_ratio"),
             100 * cfg.eval.tolerances.wallclock_rel, v("single_stage_ratio"),
             cfg.eval.timing_runs));
}

// Central differences on micro-models, through the test-side checker.
void a8_gradients(std::uint64_t seed, double tol) {
  double worst = 0.0;
  int checked = 0;
  std::string where;
  auto take = [&](const std::string& what, const gradcheck::Result& g) {
    checked += g.checked;
    if (g.max_rel_error >= worst) {
      worst = g.max_rel_error;
      where = what + " " + g.worst;
    }
  };
  for (int c = 0; c < 3; ++c) {
    const std::uint64_t cs = seed * 7919 + 31 * static_cast<std::uint64_t>(c);
    Rng data(cs);

    MotionVaeConfig vc;
    vc.frames = 8;
    vc.dims = 4;
    vc.latent_tokens = 2;
    vc.latent_dim = 3;
    vc.internal_dim = 6;
    vc.d_model = 8;
    vc.heads = 2;
    vc.encoder_blocks = 1;
    vc.decoder_blocks = 1;
    auto vae = MotionVae::create(vc, cs + 1);
    std::vector<Mat> motions{data.normal_matrix(8, 4), data.normal_matrix(8, 4)};
    take("vae", gradcheck::check_params(vae.params(), [&](nn::Binder& b) {
           Rng rng(cs + 2);
           return vae_loss(b, vae, motions, rng, 0.05).total;
         }));

    VelocityNetConfig nc;
    nc.token_dim = 4;
    nc.d_model = 6;
    nc.heads = 2;
    nc.blocks = 1;
    nc.num_classes = 3;
    nc.time_features = 6;
    nc.zero_init_output = false;
    const auto sched = PyramidSchedule::build(2, 4, {2, 2}, 1.0 / 3.0);
    std::vector<Mat> z1{data.normal_matrix(4, 4), data.normal_matrix(4, 4),
                        data.normal_matrix(4, 4)};
    const std::vector<int> labels{2, 0, 1};
    auto net = VelocityNet::create(nc, cs + 3);
    take("pflow", gradcheck::check_params(net.params(), [&](nn::Binder& b) {
           Rng rng(cs + 4);
           return pflow_loss(b, net, z1, labels, sched, rng, StageSampling::UniformStage);
         }));

    ContextAdapterConfig ac;
    ac.token_dim = 4;
    ac.heads = 1;
    ac.blocks = 1;
    ac.max_agents = 3;
    auto adapter = ContextAdapter::create(ac, cs + 5);
    for (std::size_t i = 0; i < adapter.params().size(); ++i) {
      auto& v = adapter.params().value(i);
      v += 0.2 * data.normal_matrix(v.rows(), v.cols());
    }
    const std::vector<std::vector<Mat>> contexts{
        {data.normal_matrix(4, 4), data.normal_matrix(4, 4)},
        {data.normal_matrix(4, 4)},
        {data.normal_matrix(4, 4)}};
    const std::vector<Mat> reactions{data.normal_matrix(4, 4), data.normal_matrix(4, 4),
                                     data.normal_matrix(4, 4)};
    auto sflow = [&](nn::Binder& bn, nn::Binder& ba) {
      Rng rng(cs + 6);
      return sflow_loss(bn, net, adapter.forward(ba, contexts), reactions, labels, rng, 1.0).total;
    };
    take("sflow", gradcheck::check_params(net.params(), [&](nn::Binder& b) {
           nn::Binder ba(b.tape(), adapter.params());
           return sflow(b, ba);
         }));
    take("adapter", gradcheck::check_params(adapter.params(), [&](nn::Binder& b) {
           nn::Binder bn(b.tape(), net.params());
           return sflow(bn, b);
         }));
  }
  report("A8", worst < tol,
         fmt("VAE, P-Flow and S-Flow (net and adapter) losses vs central differences, 3 cases: "
             "max rel error %.2e (<%.0e) over %d entries; worst %s",
             worst, tol, checked, where.c_str()));
}

// ---------------------------------------------------------------------------
// Trained pipeline: A7, A9, A5.

struct Trained {
  bool ok = true;
  double sflow_minutes = 0, noise_free_minutes = 0;
};

Trained train_pipeline(Tool& tool, const fs::path& dir) {
  Trained t;
  const std::vector<std::pair<std::string, std::string>> steps{
      {"synth", "synth"},
      {"train_vae", "train vae"},
      {"train_pflow", "train pflow"},
      {"train_sflow", "train sflow"},
      {"train_sflow_noise_free", "train sflow --noise-free"},
  };
  for (const auto& [name, args] : steps) {
    const double secs = tool.step(dir, name, args);
    if (secs < 0) {
      t.ok = false;
      return t;
    }
    if (name == "train_sflow") t.sflow_minutes = secs / 60;
    if (name == "train_sflow_noise_free") t.noise_free_minutes = secs / 60;
  }
  // Cached steps report their recorded time.
  for (auto [name, minutes] : {std::pair{"train_sflow", &t.sflow_minutes},
                               std::pair{"train_sflow_noise_free", &t.noise_free_minutes}}) {
    const fs::path f = dir / "stamps" / (std::string(name) + ".minutes");
    if (*minutes > 0) std::ofstream(f) << *minutes << "\n";
    else if (std::ifstream in(f); in) in >> *minutes;
  }
  return t;
}

void a7_vae(Tool& tool, const fs::path& dir, bool trained) {
  if (!trained || tool.step(dir, "eval_vae", "eval vae", false) < 0) {
    report("A7", false, "training or eval vae failed (see log.txt in the work directory)");
    return;
  }
  auto m = read_report(dir / "run/reports/vae_quality.csv");
  const auto& recon = m["recon_mse_over_variance"];
  const auto& kl = m["training_kl_min"];
  report("A7", recon.pass && kl.pass,
         fmt("validation mean-latent reconstruction MSE / variance %.4f (<0.05), worst dim %.4f; "
             "min logged training KL %.4g (>=0)",
             recon.value, m["recon_mse_over_variance_worst_dim"].value, kl.value));
}

void a9_generation(Tool& tool, const fs::path& dir, bool trained) {
  if (!trained || tool.step(dir, "eval_generation", "eval generation", false) < 0) {
    report("A9", false, "training or eval generation failed (see log.txt in the work directory)");
    return;
  }
  auto m = read_report(dir / "run/reports/generation.csv");
  const auto& g = m["features.mmd2_generated_vs_held_out"];
  report("A9", g.pass,
         fmt("N=2, n=1000: MMD2(generated, held-out) %.4g vs 3 x MMD2(real A, real B) = %.4g "
             "(ratio %.1f); VAE round trip of real scenes alone: ratio %.1f; flattened sequences "
             "ratio %.1f",
             g.value, 3 * m["features.mmd2_real_a_vs_b"].value, m["features.mmd2_ratio"].value,
             m["features.mmd2_reconstructed_ratio"].value, m["sequences.mmd2_ratio"].value));
}

void a5_accumulation(Tool& tool, const fs::path& dir, const Trained& t) {
  if (!t.ok || tool.step(dir, "eval_accumulation", "eval accumulation", false) < 0) {
    report("A5", false, "training or eval accumulation failed (see log.txt in the work directory)",
           false);
    return;
  }
  auto m = read_report(dir / "run/reports/error_accumulation.csv");
  const auto& semi = m["semi.chain_mean"];
  const auto& nf = m["noise_free.chain_mean"];
  const auto& diff = m["chain_mean_difference_semi_minus_noise_free"];
  const auto& p = m["sign_test_p_semi_better"];
  const bool budget = t.sflow_minutes <= 30 && t.noise_free_minutes <= 30;
  const bool ok = p.pass && budget;
  report("A5", ok,
         fmt("chain of 4, 200 scenes: semi-noise %.4f [%.4f, %.4f] vs noise-free %.4f [%.4f, "
             "%.4f]; difference %.4g [%.4g, %.4g]; sign test p=%.3g (<0.05); direction %s; "
             "last-agent MMD2 to real semi %.3f vs noise-free %.3f; training %.1f / %.1f min "
             "(<=30)",
             semi.value, semi.ci_low, semi.ci_high, nf.value, nf.ci_low, nf.ci_high, diff.value,
             diff.ci_low, diff.ci_high, p.value,
             m["direction_replicated"].value > 0.5 ? "replicated" : "NOT replicated",
             m["semi.agent4.mmd2"].value, m["noise_free.agent4.mmd2"].value, t.sflow_minutes,
             t.noise_free_minutes),
         false);
}

// ---------------------------------------------------------------------------
// A10: a small pipeline run twice, the second time only from the configs the
// first one materialized.

void a10_determinism(const Tool& tool, const fs::path& root) {
  const fs::path a = root / "a", b = root / "b";
  fs::remove_all(root);
  const std::string sets =
      "--set data.scenes=120 --set vae.train.steps=30 --set vae.train.batch_size=16 "
      "--set pflow.train.steps=30 --set pflow.train.batch_size=16 --set sflow.train.steps=30 "
      "--set sflow.train.batch_size=16 --set sample.scenes=4 --set eval.generation_scenes=24 "
      "--set eval.accumulation_scenes=8 --set eval.accumulation_agents=3 --set threads=2";
  // (first-run arguments, materialized config, second-run arguments)
  const std::vector<std::array<std::string, 3>> cmds{
      {"synth", "run/synth.config.json", "synth"},
      {"train vae", "run/train_vae.config.json", "train vae"},
      {"train pflow", "run/train_pflow.config.json", "train pflow"},
      {"train sflow", "run/train_sflow.config.json", "train sflow"},
      {"train sflow --noise-free", "run/train_sflow_noise_free.config.json",
       "train sflow --noise-free"},
      {"sample", "run/sample.config.json", "sample"},
      {"eval vae", "run/reports/eval_vae.config.json", "eval vae"},
      {"eval generation", "run/reports/eval_generation.config.json", "eval generation"},
      {"eval accumulation", "run/reports/eval_accumulation.config.json", "eval accumulation"},
      {"eval jump", "run/reports/eval_jump.config.json", "eval jump"},
  };
  for (const auto& c : cmds) {
    if (tool.run(a, sets + " " + c[0], "log.txt") != 0) {
      report("A10", false, "first run failed at `umf " + c[0] + "`");
      return;
    }
  }
  for (const auto& c : cmds) {
    const fs::path cfg = a / c[1];
    if (!fs::exists(cfg) || tool.run(b, "-c '" + cfg.string() + "' " + c[2], "log.txt") != 0) {
      report("A10", false, "re-run from " + c[1] + " failed");
      return;
    }
  }
  const auto ha = hash_tree(a / "run"), hb = hash_tree(b / "run");
  std::vector<std::string> diff;
  for (const auto& [k, v] : ha)
    if (!hb.count(k) || hb.at(k) != v) diff.push_back(k);
  for (const auto& [k, v] : hb)
    if (!ha.count(k)) diff.push_back(k);
  std::string d;
  for (std::size_t i = 0; i < diff.size() && i < 5; ++i) d += " " + diff[i];
  report("A10", diff.empty() && !ha.empty(),
         fmt("%zu commands re-run from materialized configs: %zu output files, %zu differ%s",
             cmds.size(), ha.size(), diff.size(), d.c_str()));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria A1..A10"};
  Tool tool;
  tool.exe = UMF_TOOL_PATH;
  fs::path workdir = UMF_ACCEPTANCE_DIR;
  std::string only;
  app.add_option("--tool", tool.exe, "umf executable");
  app.add_option("--workdir", workdir, "Directory for trained artifacts and reports");
  app.add_flag("--fresh", tool.fresh, "Retrain even when cached artifacts match");
  app.add_option("--only", only, "Comma-separated subset, e.g. A1,A4");
  app.add_option("--known-failure", known_failures,
                 "Criterion whose failure is analysed and recorded; reported but not blocking")
      ->expected(1)
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  CLI11_PARSE(app, argc, argv);

  auto want = [&](const std::string& id) {
    return only.empty() || ("," + only + ",").find("," + id + ",") != std::string::npos;
  };
  const RunConfig cfg;
  workdir = fs::absolute(workdir);
  std::printf("acceptance: umf %s, work directory %s\n", UMF_VERSION, workdir.c_str());

  try {
    if (want("A1")) a1_jump_continuity(cfg);
    if (want("A2")) a2_closed_forms();
    if (want("A3")) a3_single_stage(cfg.eval.seed);
    if (want("A4")) a4_solver_order(cfg);
    if (want("A6")) a6_flops(cfg);
    if (want("A8")) a8_gradients(cfg.eval.seed, cfg.eval.tolerances.gradient_rel);

    if (want("A5") || want("A7") || want("A9")) {
      const fs::path dir = workdir / "pipeline";
      const auto trained = train_pipeline(tool, dir);
      if (want("A7")) a7_vae(tool, dir, trained.ok);
      if (want("A9")) a9_generation(tool, dir, trained.ok);
      if (want("A5")) a5_accumulation(tool, dir, trained);
    }
    if (want("A10")) a10_determinism(tool, workdir / "determinism");
  } catch (const std::exception& e) {
    std::printf("acceptance: aborted: %s\n", e.what());
    return 2;
  }

  int blocking_failures = 0, failures = 0;
  for (const auto& o : outcomes) {
    failures += !o.pass;
    blocking_failures += !o.pass && o.blocking;
  }
  const std::string summary =
      fmt("acceptance: %zu criteria, %zu passed, %d failed (%d blocking)\n", outcomes.size(),
          outcomes.size() - failures, failures, blocking_failures);
  std::fputs(summary.c_str(), stdout);
  if (only.empty()) {
    fs::create_directories(workdir);
    io::write_text_atomic(workdir / "results.txt", transcript + summary);
  }
  return blocking_failures == 0 ? 0 : 1;
}
