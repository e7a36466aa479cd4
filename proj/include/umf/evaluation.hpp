#pragma once

#include "umf/motion_vae.hpp"
#include "umf/rng.hpp"
#include "umf/sampling.hpp"
#include "umf/schedule.hpp"
#include "umf/tensor.hpp"
#include "umf/toy_data.hpp"
#include "umf/velocity_model.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <string>
#include <vector>

namespace umf {

// Pass/fail thresholds. Metric code only compares against these.
struct Tolerances {
  double jump_mean = 1e-2;
  double jump_variance = 0.02;
  double jump_covariance = 0.02;
  double jump_control_variance = 0.1;  // the alpha/2 control must exceed this
  double order_slope_min = -1.2;
  double order_slope_max = -0.8;
  double flops_ratio_max = 0.62;
  double wallclock_rel = 0.25;
  double vae_recon_fraction = 0.05;
  double mmd_factor = 3.0;
  double sign_test_p = 0.05;
  double gradient_rel = 1e-4;

  std::string to_json() const;
  static Tolerances from_json(const std::string& text);
};

struct Metric {
  enum class Kind { Info, Below, Above, Within };
  std::string name;
  double value = 0.0;
  std::int64_t n = 0;  // samples behind the value
  Kind kind = Kind::Info;
  double lo = 0.0, hi = 0.0;  // Below uses hi, Above uses lo
  double ci_low = std::numeric_limits<double>::quiet_NaN();
  double ci_high = std::numeric_limits<double>::quiet_NaN();

  static Metric info(std::string name, double value, std::int64_t n);
  static Metric below(std::string name, double value, double bound, std::int64_t n);
  static Metric above(std::string name, double value, double bound, std::int64_t n);
  static Metric within(std::string name, double value, double lo, double hi, std::int64_t n);
  Metric& with_ci(double low, double high);

  bool checked() const { return kind != Kind::Info; }
  bool pass() const;
};

struct EvalReport {
  std::string name;
  std::vector<std::string> notes;
  std::vector<std::pair<std::string, std::string>> inputs;  // everything needed to re-run
  std::vector<Metric> metrics;
  std::vector<std::string> table_header;  // optional per-row data (curves, error tables)
  std::vector<std::vector<double>> table;

  bool passed() const;
  std::string text() const;
  std::string csv() const;  // metrics, then the table after a blank line
  // Writes <dir>/<name>.txt and <dir>/<name>.csv.
  void write(const std::filesystem::path& dir) const;
};

// Gaussian-kernel squared MMD between row sets. Bandwidth <= 0 picks the median
// heuristic: h^2 = median pairwise squared distance of the pooled rows / 2.
struct MmdResult {
  double unbiased = 0.0;
  double biased = 0.0;
  double bandwidth = 0.0;
  std::int64_t n_a = 0, n_b = 0;
};
MmdResult mmd(const Mat& a, const Mat& b, double bandwidth = 0.0);
double median_heuristic_bandwidth(const Mat& pooled, std::size_t max_rows = 2000);

// Monte-Carlo moments of jump_update applied to stage-k end samples, compared with
// the analytic stage-(k-1) start distribution: mean s' Up(Down(z1)), variance
// (1 - s')^2, zero covariance inside each duplicated block.
struct JumpMoments {
  double mean_error = 0.0;        // max abs
  double variance_error = 0.0;    // max abs over coordinates
  double covariance_error = 0.0;  // max abs over within-block pairs
  std::int64_t draws = 0;
};
JumpMoments jump_moments(const Mat& z1, const PyramidSchedule& schedule, int k, int n_mc, Rng& rng,
                         double alpha_scale = 1.0);

// Every jump of the schedule, plus the alpha/2 negative control which must fail.
EvalReport jump_continuity_report(const Mat& z1, const PyramidSchedule& schedule, int n_mc,
                                  std::uint64_t seed, const Tolerances& tol);

// Euler error on x' = -x over [0, 1] for each step count, with a log-log slope fit;
// zero and constant fields must give zero error.
EvalReport solver_order_report(const std::vector<int>& step_counts, const Tolerances& tol);

// Analytic FLOPs of the pyramid vs a single-stage schedule with the same total steps,
// plus median wall clock of both sampling loops.
EvalReport flops_ratio_report(const PyramidSchedule& schedule, const VelocityNetConfig& config,
                              int timing_runs, std::uint64_t seed, const Tolerances& tol);

// Reconstruction of held-out motions through encoder means.
EvalReport vae_quality_report(const MotionVae& vae, const Dataset& data, const Tolerances& tol);

// Per-joint velocity-magnitude histograms (bin edges from a reference set) of every agent,
// concatenated per scene.
struct HistogramFeatures {
  int bins = 8;
  std::vector<std::vector<double>> edges;  // per joint, bins - 1 interior edges

  static HistogramFeatures fit(const std::vector<Scene>& reference, int bins);
  std::vector<double> scene(const Scene& s) const;
  Mat matrix(const std::vector<Scene>& scenes) const;
};

// Generated vs held-out MMD against the real-vs-real floor, on histogram features and
// on flattened normalized sequences. Uses the biased estimator on both sides.
// `reconstructed` (optional): real scenes passed through the autoencoder, scored the
// same way; it bounds what any generator decoding through that autoencoder can reach.
EvalReport generation_report(const std::vector<Scene>& generated, const std::vector<Scene>& held_out,
                             const std::vector<Scene>& real_a, const std::vector<Scene>& real_b,
                             const Tolerances& tol,
                             const std::vector<Scene>* reconstructed = nullptr);

// Oracle deviation per agent slot for two S-Flow variants sharing VAE and prior.
struct AccumulationResult {
  // [scene][agent] RMS deviation of agent i from reaction_oracle(agent i-1); agent 0
  // holds the prior's bone-length variation (identical across variants).
  std::vector<std::vector<double>> semi, noise_free;
  std::vector<Scene> semi_scenes, noise_free_scenes;
  std::uint64_t seed = 0;
};
AccumulationResult run_accumulation(const Pipeline& semi, const Pipeline& noise_free, int n_agents,
                                    int n_scenes, std::uint64_t seed, const ToyDataConfig& data,
                                    int threads = 1);
// Curves with 95% CIs, the paired sign test at the longest chain, the noise-free trend
// test, and (given ground-truth scenes) per-slot MMD of both variants.
EvalReport error_accumulation_report(const AccumulationResult& r, const Tolerances& tol,
                                     const std::vector<Scene>* ground_truth = nullptr);

// One-sided exact sign test: P(X >= k) for X ~ Binomial(n, 1/2).
double sign_test_p(int successes, int trials);

// Standalone SVG line plot.
struct Series {
  std::string name;
  std::vector<double> x, y;
};
std::string svg_plot(const std::string& title, const std::string& x_label,
                     const std::string& y_label, const std::vector<Series>& series);

// Runs fn(i) for i in [0, n) on up to `threads` workers; results must be written by index.
void parallel_for(int n, int threads, const std::function<void(int)>& fn);

}  // namespace umf
