#include "umf/evaluation.hpp"

#include "umf/binary_io.hpp"
#include "umf/errors.hpp"
#include "umf/flow_paths.hpp"
#include "umf/resampling.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <mutex>
#include <thread>

namespace umf {

using nlohmann::json;

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

std::string fmt17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

double median(std::vector<double> v) {
  UMF_REQUIRE(!v.empty(), "median of an empty set");
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  if (v.size() % 2 == 1) return *mid;
  return 0.5 * (*mid + *std::max_element(v.begin(), mid));
}

struct MeanCi {
  double mean = 0.0, low = 0.0, high = 0.0;
};

// Normal-approximation 95% interval of a sample mean.
MeanCi mean_ci(const std::vector<double>& v) {
  MeanCi r;
  if (v.empty()) return r;
  for (double x : v) r.mean += x;
  r.mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - r.mean) * (x - r.mean);
  var = v.size() > 1 ? var / static_cast<double>(v.size() - 1) : 0.0;
  const double half = 1.959963984540054 * std::sqrt(var / static_cast<double>(v.size()));
  r.low = r.mean - half;
  r.high = r.mean + half;
  return r;
}

const char* kSubstitution =
    "Desk-scale substitute metrics: MMD on summary features and oracle deviation replace "
    "FID and R-precision, which need pretrained evaluators.";

}  // namespace

std::string Tolerances::to_json() const {
  return json{{"jump_mean", jump_mean},
              {"jump_variance", jump_variance},
              {"jump_covariance", jump_covariance},
              {"jump_control_variance", jump_control_variance},
              {"order_slope_min", order_slope_min},
              {"order_slope_max", order_slope_max},
              {"flops_ratio_max", flops_ratio_max},
              {"wallclock_rel", wallclock_rel},
              {"vae_recon_fraction", vae_recon_fraction},
              {"mmd_factor", mmd_factor},
              {"sign_test_p", sign_test_p},
              {"gradient_rel", gradient_rel}}
      .dump();
}

Tolerances Tolerances::from_json(const std::string& text) {
  const auto j = json::parse(text);
  Tolerances t;
  t.jump_mean = j.at("jump_mean");
  t.jump_variance = j.at("jump_variance");
  t.jump_covariance = j.at("jump_covariance");
  t.jump_control_variance = j.at("jump_control_variance");
  t.order_slope_min = j.at("order_slope_min");
  t.order_slope_max = j.at("order_slope_max");
  t.flops_ratio_max = j.at("flops_ratio_max");
  t.wallclock_rel = j.at("wallclock_rel");
  t.vae_recon_fraction = j.at("vae_recon_fraction");
  t.mmd_factor = j.at("mmd_factor");
  t.sign_test_p = j.at("sign_test_p");
  t.gradient_rel = j.at("gradient_rel");
  return t;
}

Metric Metric::info(std::string name, double value, std::int64_t n) {
  Metric m;
  m.name = std::move(name);
  m.value = value;
  m.n = n;
  return m;
}

Metric Metric::below(std::string name, double value, double bound, std::int64_t n) {
  Metric m = info(std::move(name), value, n);
  m.kind = Kind::Below;
  m.hi = bound;
  return m;
}

Metric Metric::above(std::string name, double value, double bound, std::int64_t n) {
  Metric m = info(std::move(name), value, n);
  m.kind = Kind::Above;
  m.lo = bound;
  return m;
}

Metric Metric::within(std::string name, double value, double lo, double hi, std::int64_t n) {
  Metric m = info(std::move(name), value, n);
  m.kind = Kind::Within;
  m.lo = lo;
  m.hi = hi;
  return m;
}

Metric& Metric::with_ci(double low, double high) {
  ci_low = low;
  ci_high = high;
  return *this;
}

bool Metric::pass() const {
  if (!std::isfinite(value)) return kind == Kind::Info;
  switch (kind) {
    case Kind::Info: return true;
    case Kind::Below: return value < hi;
    case Kind::Above: return value > lo;
    case Kind::Within: return value >= lo && value <= hi;
  }
  return false;
}

bool EvalReport::passed() const {
  return std::all_of(metrics.begin(), metrics.end(), [](const Metric& m) { return m.pass(); });
}

std::string EvalReport::text() const {
  std::string out = "report: " + name + "\n";
  for (const auto& n : notes) out += "note: " + n + "\n";
  for (const auto& [k, v] : inputs) out += "input " + k + " = " + v + "\n";
  for (const auto& m : metrics) {
    out += m.name + " = " + fmt(m.value) + "  [n=" + std::to_string(m.n) + "]";
    if (!std::isnan(m.ci_low)) out += "  95% CI [" + fmt(m.ci_low) + ", " + fmt(m.ci_high) + "]";
    switch (m.kind) {
      case Metric::Kind::Info: break;
      case Metric::Kind::Below: out += "  (< " + fmt(m.hi) + ")"; break;
      case Metric::Kind::Above: out += "  (> " + fmt(m.lo) + ")"; break;
      case Metric::Kind::Within: out += "  (in [" + fmt(m.lo) + ", " + fmt(m.hi) + "])"; break;
    }
    if (m.checked()) out += m.pass() ? "  PASS" : "  FAIL";
    out += "\n";
  }
  out += std::string("overall: ") + (passed() ? "PASS" : "FAIL") + "\n";
  return out;
}

std::string EvalReport::csv() const {
  std::string out = "metric,value,n,ci_low,ci_high,kind,lo,hi,pass\n";
  static const char* kinds[] = {"info", "below", "above", "within"};
  for (const auto& m : metrics)
    out += m.name + "," + fmt17(m.value) + "," + std::to_string(m.n) + "," + fmt17(m.ci_low) + "," +
           fmt17(m.ci_high) + "," + kinds[static_cast<int>(m.kind)] + "," + fmt17(m.lo) + "," +
           fmt17(m.hi) + "," + (m.pass() ? "1" : "0") + "\n";
  if (!table_header.empty()) {
    out += "\n";
    for (std::size_t i = 0; i < table_header.size(); ++i)
      out += (i ? "," : "") + table_header[i];
    out += "\n";
    for (const auto& row : table) {
      for (std::size_t i = 0; i < row.size(); ++i) out += (i ? "," : "") + fmt17(row[i]);
      out += "\n";
    }
  }
  return out;
}

void EvalReport::write(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  io::write_text_atomic(dir / (name + ".txt"), text());
  io::write_text_atomic(dir / (name + ".csv"), csv());
}

// ---------------------------------------------------------------------------

namespace {
Mat squared_distances(const Mat& a, const Mat& b) {
  const Eigen::VectorXd na = a.rowwise().squaredNorm();
  const Eigen::VectorXd nb = b.rowwise().squaredNorm();
  Mat d = -2.0 * a * b.transpose();
  d.colwise() += na;
  d.rowwise() += nb.transpose();
  return d.cwiseMax(0.0);
}
}  // namespace

double median_heuristic_bandwidth(const Mat& pooled, std::size_t max_rows) {
  UMF_REQUIRE(pooled.rows() >= 2, "median heuristic needs at least two rows");
  const auto n = static_cast<std::size_t>(pooled.rows());
  const std::size_t take = std::min(n, std::max<std::size_t>(2, max_rows));
  Mat sub(static_cast<Eigen::Index>(take), pooled.cols());
  for (std::size_t i = 0; i < take; ++i)
    sub.row(static_cast<Eigen::Index>(i)) = pooled.row(static_cast<Eigen::Index>(i * n / take));
  const Mat d = squared_distances(sub, sub);
  std::vector<double> vals;
  vals.reserve(take * (take - 1) / 2);
  for (Eigen::Index i = 0; i < d.rows(); ++i)
    for (Eigen::Index j = i + 1; j < d.cols(); ++j) vals.push_back(d(i, j));
  const double med = median(std::move(vals));
  return med > 0.0 ? std::sqrt(med / 2.0) : 1.0;
}

MmdResult mmd(const Mat& a, const Mat& b, double bandwidth) {
  UMF_REQUIRE(a.rows() >= 2 && b.rows() >= 2, "mmd: each set needs at least two samples");
  UMF_REQUIRE(a.cols() == b.cols(), "mmd: sample dimensions differ");
  MmdResult r;
  r.n_a = a.rows();
  r.n_b = b.rows();
  if (bandwidth <= 0.0) {
    Mat pooled(a.rows() + b.rows(), a.cols());
    pooled << a, b;
    bandwidth = median_heuristic_bandwidth(pooled);
  }
  r.bandwidth = bandwidth;
  const double g = -1.0 / (2.0 * bandwidth * bandwidth);
  const Mat kaa = (g * squared_distances(a, a)).array().exp().matrix();
  const Mat kbb = (g * squared_distances(b, b)).array().exp().matrix();
  const Mat kab = (g * squared_distances(a, b)).array().exp().matrix();
  const double n = static_cast<double>(a.rows()), m = static_cast<double>(b.rows());
  const double saa = kaa.sum(), sbb = kbb.sum(), sab = kab.sum();
  r.biased = saa / (n * n) + sbb / (m * m) - 2.0 * sab / (n * m);
  r.unbiased = (saa - kaa.trace()) / (n * (n - 1)) + (sbb - kbb.trace()) / (m * (m - 1)) -
               2.0 * sab / (n * m);
  return r;
}

// ---------------------------------------------------------------------------

JumpMoments jump_moments(const Mat& z1, const PyramidSchedule& schedule, int k, int n_mc, Rng& rng,
                         double alpha_scale) {
  UMF_REQUIRE(k >= 2 && k <= schedule.stages(), "jump_moments: stage must have a successor");
  UMF_REQUIRE(n_mc >= 2, "jump_moments: need at least two draws");
  const double e = schedule.window(k).end;
  const double s_next = schedule.window(k - 1).start;
  const double alpha = alpha_scale * jump_coefficients(s_next).alpha;
  const Mat down = downsample(z1, schedule.factor(k));
  const Mat end_mean = e * down;
  const Mat target_mean = s_next * upsample(down, 2);
  const double target_var = (1.0 - s_next) * (1.0 - s_next);

  const auto rows = target_mean.rows(), cols = target_mean.cols();
  Mat sum = Mat::Zero(rows, cols), sq = Mat::Zero(rows, cols);
  Mat cross = Mat::Zero(rows / 2, cols);
  for (int i = 0; i < n_mc; ++i) {
    const Mat end = end_mean + (1.0 - e) * rng.normal_matrix(down.rows(), down.cols());
    const Mat x = jump_update_with_alpha(end, s_next, e, alpha, rng) - target_mean;
    sum += x;
    sq += x.cwiseProduct(x);
    for (Eigen::Index b = 0; b < rows / 2; ++b)
      cross.row(b) += x.row(2 * b).cwiseProduct(x.row(2 * b + 1));
  }
  const double n = n_mc;
  const Mat mean = sum / n;
  JumpMoments m;
  m.draws = n_mc;
  m.mean_error = mean.cwiseAbs().maxCoeff();
  const Mat var = (sq - n * mean.cwiseProduct(mean)) / (n - 1);
  m.variance_error = (var.array() - target_var).abs().maxCoeff();
  Mat cov(rows / 2, cols);
  for (Eigen::Index b = 0; b < rows / 2; ++b)
    cov.row(b) = (cross.row(b) - n * mean.row(2 * b).cwiseProduct(mean.row(2 * b + 1))) / (n - 1);
  m.covariance_error = cov.cwiseAbs().maxCoeff();
  return m;
}

EvalReport jump_continuity_report(const Mat& z1, const PyramidSchedule& schedule, int n_mc,
                                  std::uint64_t seed, const Tolerances& tol) {
  UMF_REQUIRE(n_mc >= 10000, "jump continuity: need at least 1e4 draws");
  UMF_REQUIRE(schedule.stages() >= 2, "jump continuity: schedule has no jump");
  EvalReport r;
  r.name = "jump_continuity";
  r.notes.push_back("Moments of the renoised jump against the analytic start distribution of the "
                    "next stage; the alpha/2 control must show a variance error.");
  r.inputs = {{"seed", std::to_string(seed)},
              {"n_mc", std::to_string(n_mc)},
              {"schedule", schedule.to_json()}};
  for (int k = schedule.stages(); k >= 2; --k) {
    const std::string tag = "jump" + std::to_string(k) + "to" + std::to_string(k - 1);
    Rng rng = Rng::derive(seed, {static_cast<std::uint64_t>(k), 1});
    const auto m = jump_moments(z1, schedule, k, n_mc, rng);
    r.metrics.push_back(Metric::below(tag + ".mean_error", m.mean_error, tol.jump_mean, m.draws));
    r.metrics.push_back(
        Metric::below(tag + ".variance_error", m.variance_error, tol.jump_variance, m.draws));
    r.metrics.push_back(
        Metric::below(tag + ".covariance_error", m.covariance_error, tol.jump_covariance, m.draws));
    Rng control_rng = Rng::derive(seed, {static_cast<std::uint64_t>(k), 2});
    const auto c = jump_moments(z1, schedule, k, n_mc, control_rng, 0.5);
    r.metrics.push_back(Metric::above(tag + ".control_half_alpha.variance_error", c.variance_error,
                                      tol.jump_control_variance, c.draws));
  }
  return r;
}

// ---------------------------------------------------------------------------

namespace {
double fit_slope(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    sxy += x[i] * y[i];
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}
}  // namespace

EvalReport solver_order_report(const std::vector<int>& step_counts, const Tolerances& tol) {
  UMF_REQUIRE(step_counts.size() >= 2, "solver order: need at least two step counts");
  EvalReport r;
  r.name = "solver_order";
  r.notes.push_back("Euler on x' = -x, x(0) = 1 over [0, 1]; exact solution e^-1.");
  std::string counts;
  for (int m : step_counts) counts += (counts.empty() ? "" : " ") + std::to_string(m);
  r.inputs = {{"step_counts", counts}};
  r.table_header = {"steps", "exp_error", "zero_error", "constant_error"};

  const Mat x0 = (Mat(1, 3) << 1.0, -0.5, 2.0).finished();
  const Mat v = (Mat(1, 3) << 0.75, -1.5, 0.125).finished();
  const Field decay = [](const Mat& x, double) { return Mat(-x); };
  const Field zero = [](const Mat& x, double) { return Mat(Mat::Zero(x.rows(), x.cols())); };
  const Field constant = [&](const Mat&, double) { return v; };
  std::vector<double> lx, ly, control_y;
  double zero_max = 0.0, const_max = 0.0;
  for (int m : step_counts) {
    const double err =
        (euler_solve(decay, x0, 0.0, 1.0, m) - std::exp(-1.0) * x0).cwiseAbs().maxCoeff();
    const double ez = (euler_solve(zero, x0, 0.0, 1.0, m) - x0).cwiseAbs().maxCoeff();
    const double ec = (euler_solve(constant, x0, 0.0, 1.0, m) - (x0 + v)).cwiseAbs().maxCoeff();
    zero_max = std::max(zero_max, ez);
    const_max = std::max(const_max, ec);
    r.table.push_back({static_cast<double>(m), err, ez, ec});
    lx.push_back(std::log(m));
    ly.push_back(std::log(err));
    // Control: a solver stuck at the smallest step count cannot converge.
    control_y.push_back(std::log(
        (euler_solve(decay, x0, 0.0, 1.0, step_counts.front()) - std::exp(-1.0) * x0)
            .cwiseAbs()
            .maxCoeff()));
  }
  const auto n = static_cast<std::int64_t>(step_counts.size());
  r.metrics.push_back(
      Metric::within("slope", fit_slope(lx, ly), tol.order_slope_min, tol.order_slope_max, n));
  r.metrics.push_back(Metric::within("zero_field_error", zero_max, 0.0, 0.0, n));
  r.metrics.push_back(Metric::within("constant_field_error", const_max, 0.0, 0.0, n));
  r.metrics.push_back(
      Metric::above("control_fixed_steps.slope", fit_slope(lx, control_y), tol.order_slope_max, n));
  return r;
}

// ---------------------------------------------------------------------------

EvalReport flops_ratio_report(const PyramidSchedule& schedule, const VelocityNetConfig& config,
                              int timing_runs, std::uint64_t seed, const Tolerances& tol) {
  UMF_REQUIRE(timing_runs >= 1, "flops report: timing_runs must be >= 1");
  auto analytic = [&](const PyramidSchedule& s) {
    double f = 0.0;
    for (int k = 1; k <= s.stages(); ++k) f += s.steps(k) * flops_estimate(s.length(k), config);
    return f;
  };
  const int total = schedule.total_steps();
  const auto full = PyramidSchedule::build(1, schedule.base_length(), {total}, 0.0);
  const double f_pyr = analytic(schedule), f_full = analytic(full);
  const double ratio = f_pyr / f_full;

  VelocityNetConfig timed = config;
  timed.zero_init_output = false;
  const auto net = VelocityNet::create(timed, seed);
  auto time_once = [&](const PyramidSchedule& s, std::uint64_t i) {
    Rng rng = Rng::derive(seed, {i});
    const auto t0 = std::chrono::steady_clock::now();
    const Mat out = sample_prior(net, s, Condition{0}, rng);
    const auto t1 = std::chrono::steady_clock::now();
    if (!out.allFinite()) throw NumericError("flops report: non-finite sample");
    return std::chrono::duration<double>(t1 - t0).count();
  };
  // Warm up, then interleave the two loops so drift affects both alike.
  time_once(schedule, 0);
  time_once(full, 0);
  std::vector<double> tp, tf;
  for (int i = 0; i < timing_runs; ++i) {
    tp.push_back(time_once(schedule, static_cast<std::uint64_t>(i)));
    tf.push_back(time_once(full, static_cast<std::uint64_t>(i)));
  }
  const double wall = median(tp) / median(tf);

  const auto k1 = PyramidSchedule::build(1, schedule.base_length(), {total}, 0.0);
  const double k1_ratio = analytic(k1) / f_full;

  EvalReport r;
  r.name = "flops_ratio";
  r.notes.push_back("Pyramid sampling cost against a single full-resolution stage with the same "
                    "total step count.");
  r.inputs = {{"schedule", schedule.to_json()},
              {"model", config.to_json()},
              {"timing_runs", std::to_string(timing_runs)},
              {"seed", std::to_string(seed)}};
  r.metrics.push_back(Metric::info("pyramid_gflops", f_pyr * 1e-9, 1));
  r.metrics.push_back(Metric::info("full_gflops", f_full * 1e-9, 1));
  r.metrics.push_back(Metric::below("flops_ratio", ratio, tol.flops_ratio_max, 1));
  r.metrics.push_back(Metric::info("pyramid_median_seconds", median(tp), timing_runs));
  r.metrics.push_back(Metric::info("full_median_seconds", median(tf), timing_runs));
  r.metrics.push_back(Metric::within("wallclock_ratio", wall, ratio * (1.0 - tol.wallclock_rel),
                                     ratio * (1.0 + tol.wallclock_rel), timing_runs));
  r.metrics.push_back(Metric::within("single_stage_ratio", k1_ratio, 1.0, 1.0, 1));
  return r;
}

// ---------------------------------------------------------------------------

EvalReport vae_quality_report(const MotionVae& vae, const Dataset& data, const Tolerances& tol) {
  UMF_REQUIRE(!data.scenes.empty(), "vae report: empty dataset");
  const int dims = data.dims;
  RowVec sum = RowVec::Zero(dims), sq = RowVec::Zero(dims), err = RowVec::Zero(dims);
  double count = 0.0;
  std::vector<Mat> chunk;
  auto flush = [&]() {
    if (chunk.empty()) return;
    std::vector<Mat> mus;
    for (auto& [mu, lv] : vae.encode_batch(chunk)) mus.push_back(std::move(mu));
    const auto rec = vae.decode_batch(mus);
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      sum += chunk[i].colwise().sum();
      sq += chunk[i].array().square().matrix().colwise().sum();
      err += (rec[i] - chunk[i]).array().square().matrix().colwise().sum();
      count += static_cast<double>(chunk[i].rows());
    }
    chunk.clear();
  };
  for (const auto& s : data.scenes)
    for (const auto& a : s.agents) {
      chunk.push_back(a);
      if (chunk.size() == 256) flush();
    }
  flush();
  const RowVec mean = sum / count;
  const RowVec var = (sq / count - mean.cwiseProduct(mean)).cwiseMax(1e-12);
  const RowVec mse = err / count;
  const RowVec frac = mse.cwiseQuotient(var);

  EvalReport r;
  r.name = "vae_quality";
  r.notes.push_back("Decoder applied to encoder means; squared error per coordinate relative to "
                    "the dataset variance of that coordinate.");
  const auto n = static_cast<std::int64_t>(count);
  r.metrics.push_back(
      Metric::below("recon_mse_over_variance", frac.mean(), tol.vae_recon_fraction, n));
  r.metrics.push_back(Metric::info("recon_mse_over_variance_worst_dim", frac.maxCoeff(), n));
  r.metrics.push_back(Metric::info("recon_mse_raw", mse.mean(), n));
  r.table_header = {"dim", "mse", "variance", "fraction"};
  for (int d = 0; d < dims; ++d) r.table.push_back({double(d), mse(d), var(d), frac(d)});
  return r;
}

// ---------------------------------------------------------------------------

namespace {
// Per-frame speed of each joint, (frames - 1) x joints.
Mat joint_speeds(const MotionSequence& m) {
  const auto joints = m.cols() / 2;
  Mat out(m.rows() - 1, joints);
  for (Eigen::Index f = 0; f + 1 < m.rows(); ++f)
    for (Eigen::Index j = 0; j < joints; ++j)
      out(f, j) = std::hypot(m(f + 1, 2 * j) - m(f, 2 * j), m(f + 1, 2 * j + 1) - m(f, 2 * j + 1));
  return out;
}
}  // namespace

HistogramFeatures HistogramFeatures::fit(const std::vector<Scene>& reference, int bins) {
  UMF_REQUIRE(!reference.empty(), "histogram features: empty reference");
  UMF_REQUIRE(bins >= 2, "histogram features: need at least two bins");
  HistogramFeatures h;
  h.bins = bins;
  const auto joints = reference.front().agents.front().cols() / 2;
  std::vector<std::vector<double>> pooled(static_cast<std::size_t>(joints));
  for (const auto& s : reference)
    for (const auto& a : s.agents) {
      const Mat sp = joint_speeds(a);
      for (Eigen::Index j = 0; j < joints; ++j)
        for (Eigen::Index f = 0; f < sp.rows(); ++f) pooled[j].push_back(sp(f, j));
    }
  for (auto& v : pooled) {
    std::sort(v.begin(), v.end());
    std::vector<double> e;
    for (int b = 1; b < bins; ++b) e.push_back(v[v.size() * b / bins]);
    h.edges.push_back(std::move(e));
  }
  return h;
}

std::vector<double> HistogramFeatures::scene(const Scene& s) const {
  std::vector<double> out;
  for (const auto& a : s.agents) {
    const Mat sp = joint_speeds(a);
    UMF_REQUIRE(static_cast<std::size_t>(sp.cols()) == edges.size(),
                "histogram features: joint count differs from the reference");
    for (Eigen::Index j = 0; j < sp.cols(); ++j) {
      std::vector<double> hist(bins, 0.0);
      for (Eigen::Index f = 0; f < sp.rows(); ++f) {
        const auto& e = edges[j];
        const auto bin = std::upper_bound(e.begin(), e.end(), sp(f, j)) - e.begin();
        hist[bin] += 1.0 / static_cast<double>(sp.rows());
      }
      out.insert(out.end(), hist.begin(), hist.end());
    }
  }
  return out;
}

Mat HistogramFeatures::matrix(const std::vector<Scene>& scenes) const {
  UMF_REQUIRE(!scenes.empty(), "histogram features: no scenes");
  const auto first = scene(scenes.front());
  Mat out(static_cast<Eigen::Index>(scenes.size()), static_cast<Eigen::Index>(first.size()));
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const auto f = i == 0 ? first : scene(scenes[i]);
    UMF_REQUIRE(f.size() == first.size(), "histogram features: scenes differ in agent count");
    for (std::size_t c = 0; c < f.size(); ++c)
      out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = f[c];
  }
  return out;
}

namespace {
// Flattened sequences standardized with the statistics of `ref`.
Mat flattened(const std::vector<Scene>& scenes, const Dataset& ref) {
  const auto& s0 = scenes.front();
  const Eigen::Index width = static_cast<Eigen::Index>(s0.agents.size()) * s0.agents[0].size();
  Mat out(static_cast<Eigen::Index>(scenes.size()), width);
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    Eigen::Index off = 0;
    UMF_REQUIRE(scenes[i].agents.size() == s0.agents.size(), "flattened: agent counts differ");
    for (const auto& a : scenes[i].agents) {
      const Mat n = ref.normalize(a);
      for (Eigen::Index f = 0; f < n.rows(); ++f)
        for (Eigen::Index d = 0; d < n.cols(); ++d) out(static_cast<Eigen::Index>(i), off++) = n(f, d);
    }
  }
  return out;
}
}  // namespace

EvalReport generation_report(const std::vector<Scene>& generated, const std::vector<Scene>& held_out,
                             const std::vector<Scene>& real_a, const std::vector<Scene>& real_b,
                             const Tolerances& tol, const std::vector<Scene>* reconstructed) {
  UMF_REQUIRE(!generated.empty() && !held_out.empty() && !real_a.empty() && !real_b.empty(),
              "generation report: every set must be non-empty");
  const auto h = HistogramFeatures::fit(real_a, 8);
  const Mat fa = h.matrix(real_a), fb = h.matrix(real_b);
  const Mat fg = h.matrix(generated), fh = h.matrix(held_out);
  Mat pooled(fa.rows() + fb.rows(), fa.cols());
  pooled << fa, fb;
  const double bw = median_heuristic_bandwidth(pooled);
  const auto floor = mmd(fa, fb, bw);
  const auto gen = mmd(fg, fh, bw);

  const Dataset ref = Dataset::from_scenes(real_a);
  const Mat sa = flattened(real_a, ref), sb = flattened(real_b, ref);
  const Mat sg = flattened(generated, ref), sh = flattened(held_out, ref);
  Mat spooled(sa.rows() + sb.rows(), sa.cols());
  spooled << sa, sb;
  const double sbw = median_heuristic_bandwidth(spooled);
  const auto sfloor = mmd(sa, sb, sbw);
  const auto sgen = mmd(sg, sh, sbw);

  EvalReport r;
  r.name = "generation";
  r.notes.push_back(kSubstitution);
  r.notes.push_back("Biased MMD^2 with one median-heuristic bandwidth from the two real splits; "
                    "the real-vs-real value is the floor.");
  r.inputs = {{"n_generated", std::to_string(generated.size())},
              {"n_held_out", std::to_string(held_out.size())},
              {"n_real_a", std::to_string(real_a.size())},
              {"n_real_b", std::to_string(real_b.size())},
              {"histogram_bins", "8"}};
  const auto n = static_cast<std::int64_t>(generated.size());
  r.metrics.push_back(Metric::info("features.bandwidth", bw, pooled.rows()));
  r.metrics.push_back(Metric::info("features.mmd2_real_a_vs_b", floor.biased, floor.n_a));
  r.metrics.push_back(Metric::info("features.mmd2_unbiased_real_a_vs_b", floor.unbiased, floor.n_a));
  r.metrics.push_back(Metric::info("features.mmd2_unbiased_generated_vs_held_out", gen.unbiased, n));
  r.metrics.push_back(Metric::below("features.mmd2_generated_vs_held_out", gen.biased,
                                    tol.mmd_factor * floor.biased, n));
  r.metrics.push_back(Metric::info("features.mmd2_ratio", gen.biased / floor.biased, n));
  r.metrics.push_back(Metric::info("sequences.mmd2_real_a_vs_b", sfloor.biased, sfloor.n_a));
  r.metrics.push_back(Metric::info("sequences.mmd2_generated_vs_held_out", sgen.biased, n));
  r.metrics.push_back(Metric::info("sequences.mmd2_ratio", sgen.biased / sfloor.biased, n));
  if (reconstructed && !reconstructed->empty()) {
    const auto rec = mmd(h.matrix(*reconstructed), fh, bw);
    const auto srec = mmd(flattened(*reconstructed, ref), sh, sbw);
    const auto nr = static_cast<std::int64_t>(reconstructed->size());
    r.metrics.push_back(Metric::info("features.mmd2_reconstructed_vs_held_out", rec.biased, nr));
    r.metrics.push_back(Metric::info("features.mmd2_reconstructed_ratio", rec.biased / floor.biased, nr));
    r.metrics.push_back(Metric::info("sequences.mmd2_reconstructed_vs_held_out", srec.biased, nr));
  }
  return r;
}

// ---------------------------------------------------------------------------

double sign_test_p(int successes, int trials) {
  UMF_REQUIRE(trials >= 0 && successes >= 0 && successes <= trials, "sign test: bad counts");
  if (trials == 0) return 1.0;
  double p = 0.0;
  const double n = trials;
  for (int i = successes; i <= trials; ++i)
    p += std::exp(std::lgamma(n + 1) - std::lgamma(i + 1.0) - std::lgamma(n - i + 1) -
                  n * std::log(2.0));
  return std::min(1.0, p);
}

namespace {
double rms(const Mat& m) { return std::sqrt(m.squaredNorm() / static_cast<double>(m.size())); }

double bone_variation(const MotionSequence& m) {
  const Mat b = bone_lengths(m);
  const RowVec mean = b.colwise().mean();
  return rms(b.rowwise() - mean);
}

std::vector<double> deviations(const std::vector<MotionSequence>& agents, const ToyDataConfig& cfg) {
  std::vector<double> out{bone_variation(agents.front())};
  for (std::size_t i = 1; i < agents.size(); ++i)
    out.push_back(rms(agents[i] - reaction_oracle(agents[i - 1], cfg)));
  return out;
}
}  // namespace

AccumulationResult run_accumulation(const Pipeline& semi, const Pipeline& noise_free, int n_agents,
                                    int n_scenes, std::uint64_t seed, const ToyDataConfig& data,
                                    int threads) {
  UMF_REQUIRE(n_agents >= 2, "accumulation: need at least two agents");
  UMF_REQUIRE(n_scenes >= 1, "accumulation: need at least one scene");
  AccumulationResult r;
  r.seed = seed;
  r.semi.resize(n_scenes);
  r.noise_free.resize(n_scenes);
  r.semi_scenes.resize(n_scenes);
  r.noise_free_scenes.resize(n_scenes);
  const int classes = semi.pflow.config().num_classes;
  parallel_for(n_scenes, threads, [&](int i) {
    Rng rng = scene_rng(seed, static_cast<std::uint64_t>(i));
    const Condition cond{rng.uniform_int(classes)};
    Rng ra = rng, rb = rng;
    auto a = generate_scene(semi, n_agents, cond, ra);
    auto b = generate_scene(noise_free, n_agents, cond, rb);
    r.semi[i] = deviations(a.motions, data);
    r.noise_free[i] = deviations(b.motions, data);
    r.semi_scenes[i] = Scene{std::move(a.motions), cond.label};
    r.noise_free_scenes[i] = Scene{std::move(b.motions), cond.label};
  });
  return r;
}

EvalReport error_accumulation_report(const AccumulationResult& res, const Tolerances& tol,
                                     const std::vector<Scene>* ground_truth) {
  UMF_REQUIRE(!res.semi.empty(), "accumulation report: no scenes");
  const int n_scenes = static_cast<int>(res.semi.size());
  const int n_agents = static_cast<int>(res.semi.front().size());
  EvalReport r;
  r.name = "error_accumulation";
  r.notes.push_back(kSubstitution);
  r.notes.push_back("Deviation of agent i: RMS distance of its decoded motion from the reaction "
                    "rule applied to agent i-1. Agent 1 row: RMS bone-length variation of the "
                    "prior sample, shared by both variants.");
  r.notes.push_back("chain_mean: per-scene mean deviation over agents 2..N; semi-noise vs noise-free "
                    "compared by a paired one-sided sign test.");
  r.inputs = {{"seed", std::to_string(res.seed)},
              {"n_scenes", std::to_string(n_scenes)},
              {"n_agents", std::to_string(n_agents)}};
  r.table_header = {"agent", "semi_mean", "semi_ci_low", "semi_ci_high", "noise_free_mean",
                    "noise_free_ci_low", "noise_free_ci_high"};
  for (int a = 0; a < n_agents; ++a) {
    std::vector<double> s, f;
    for (int i = 0; i < n_scenes; ++i) {
      s.push_back(res.semi[i][a]);
      f.push_back(res.noise_free[i][a]);
    }
    const auto cs = mean_ci(s), cf = mean_ci(f);
    r.table.push_back({double(a + 1), cs.mean, cs.low, cs.high, cf.mean, cf.low, cf.high});
    r.metrics.push_back(Metric::info("semi.agent" + std::to_string(a + 1), cs.mean, n_scenes)
                            .with_ci(cs.low, cs.high));
    r.metrics.push_back(Metric::info("noise_free.agent" + std::to_string(a + 1), cf.mean, n_scenes)
                            .with_ci(cf.low, cf.high));
  }

  std::vector<double> semi_chain, nf_chain, diff;
  int better = 0, nonzero = 0, rising = 0, rising_n = 0;
  for (int i = 0; i < n_scenes; ++i) {
    double s = 0.0, f = 0.0;
    for (int a = 1; a < n_agents; ++a) {
      s += res.semi[i][a];
      f += res.noise_free[i][a];
    }
    s /= n_agents - 1;
    f /= n_agents - 1;
    semi_chain.push_back(s);
    nf_chain.push_back(f);
    diff.push_back(s - f);
    if (s != f) {
      ++nonzero;
      if (s < f) ++better;
    }
    const double d = res.noise_free[i][n_agents - 1] - res.noise_free[i][1];
    if (d != 0.0) {
      ++rising_n;
      if (d > 0.0) ++rising;
    }
  }
  const auto cs = mean_ci(semi_chain), cf = mean_ci(nf_chain), cd = mean_ci(diff);
  r.metrics.push_back(Metric::info("semi.chain_mean", cs.mean, n_scenes).with_ci(cs.low, cs.high));
  r.metrics.push_back(
      Metric::info("noise_free.chain_mean", cf.mean, n_scenes).with_ci(cf.low, cf.high));
  r.metrics.push_back(
      Metric::info("chain_mean_difference_semi_minus_noise_free", cd.mean, n_scenes)
          .with_ci(cd.low, cd.high));
  r.metrics.push_back(Metric::info("scenes_semi_better", better, nonzero));
  const double p = sign_test_p(better, nonzero);
  r.metrics.push_back(Metric::below("sign_test_p_semi_better", p, tol.sign_test_p, nonzero));
  r.metrics.push_back(Metric::info("direction_replicated", cs.mean <= cf.mean ? 1.0 : 0.0, n_scenes));
  r.metrics.push_back(Metric::info("noise_free_trend_sign_test_p", sign_test_p(rising, rising_n),
                                   rising_n));

  if (ground_truth && !ground_truth->empty()) {
    for (int a = 0; a < n_agents; ++a) {
      auto slot = [&](const std::vector<Scene>& scenes) {
        std::vector<Scene> out;
        for (const auto& s : scenes)
          if (static_cast<int>(s.agents.size()) > a) out.push_back(Scene{{s.agents[a]}, s.label});
        return out;
      };
      const auto truth = slot(*ground_truth);
      if (truth.size() < 2) continue;
      const auto h = HistogramFeatures::fit(truth, 8);
      const Mat ft = h.matrix(truth);
      const double bw = median_heuristic_bandwidth(ft);
      const auto ms = mmd(h.matrix(slot(res.semi_scenes)), ft, bw);
      const auto mf = mmd(h.matrix(slot(res.noise_free_scenes)), ft, bw);
      r.metrics.push_back(
          Metric::info("semi.agent" + std::to_string(a + 1) + ".mmd2", ms.biased, n_scenes));
      r.metrics.push_back(
          Metric::info("noise_free.agent" + std::to_string(a + 1) + ".mmd2", mf.biased, n_scenes));
    }
  }
  return r;
}

// ---------------------------------------------------------------------------

std::string svg_plot(const std::string& title, const std::string& x_label,
                     const std::string& y_label, const std::vector<Series>& series) {
  const double W = 640, H = 400, L = 70, R = 150, T = 40, B = 50;
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  if (x0 > x1) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  std::string out = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"400\" "
                    "font-family=\"sans-serif\" font-size=\"12\">\n";
  out += "<rect width=\"640\" height=\"400\" fill=\"white\"/>\n";
  out += "<text x=\"" + fmt(W / 2) + "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" + title +
         "</text>\n";
  out += "<line x1=\"" + fmt(L) + "\" y1=\"" + fmt(H - B) + "\" x2=\"" + fmt(W - R) + "\" y2=\"" +
         fmt(H - B) + "\" stroke=\"black\"/>\n";
  out += "<line x1=\"" + fmt(L) + "\" y1=\"" + fmt(T) + "\" x2=\"" + fmt(L) + "\" y2=\"" +
         fmt(H - B) + "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = x0 + (x1 - x0) * i / 4, yv = y0 + (y1 - y0) * i / 4;
    out += "<text x=\"" + fmt(px(xv)) + "\" y=\"" + fmt(H - B + 16) +
           "\" text-anchor=\"middle\">" + fmt(xv) + "</text>\n";
    out += "<text x=\"" + fmt(L - 6) + "\" y=\"" + fmt(py(yv) + 4) + "\" text-anchor=\"end\">" +
           fmt(yv) + "</text>\n";
  }
  out += "<text x=\"" + fmt((L + W - R) / 2) + "\" y=\"" + fmt(H - 12) +
         "\" text-anchor=\"middle\">" + x_label + "</text>\n";
  out += "<text x=\"16\" y=\"" + fmt((T + H - B) / 2) + "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " +
         fmt((T + H - B) / 2) + ")\">" + y_label + "</text>\n";
  for (std::size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    const char* c = colors[si % 6];
    out += "<polyline fill=\"none\" stroke=\"" + std::string(c) + "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i)
      if (std::isfinite(s.x[i]) && std::isfinite(s.y[i]))
        out += fmt(px(s.x[i])) + "," + fmt(py(s.y[i])) + " ";
    out += "\"/>\n";
    const double ly = T + 16 * static_cast<double>(si);
    out += "<line x1=\"" + fmt(W - R + 10) + "\" y1=\"" + fmt(ly) + "\" x2=\"" + fmt(W - R + 30) +
           "\" y2=\"" + fmt(ly) + "\" stroke=\"" + c + "\" stroke-width=\"2\"/>\n";
    out += "<text x=\"" + fmt(W - R + 34) + "\" y=\"" + fmt(ly + 4) + "\">" + s.name + "</text>\n";
  }
  out += "</svg>\n";
  return out;
}

void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex mu;
  auto worker = [&]() {
    for (int i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!error) error = std::current_exception();
        next = n;
      }
    }
  };
  std::vector<std::thread> pool;
  for (int t = 0; t < std::min(threads, n); ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace umf
