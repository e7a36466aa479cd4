#include <doctest.h>

#include "umf/evaluation.hpp"
#include "umf/errors.hpp"

#include <cmath>
#include <filesystem>
#include <stdexcept>

using namespace umf;
namespace fs = std::filesystem;

namespace {
VelocityNetConfig micro_net(int r) {
  VelocityNetConfig c;
  c.token_dim = r;
  c.d_model = 8;
  c.heads = 2;
  c.blocks = 1;
  c.num_classes = 2;
  c.time_features = 4;
  c.zero_init_output = false;
  return c;
}

Pipeline micro_pipeline(std::uint64_t seed) {
  MotionVaeConfig vc;
  vc.frames = 8;
  vc.dims = 6;
  vc.latent_tokens = 4;
  vc.latent_dim = 4;
  vc.internal_dim = 5;
  vc.d_model = 8;
  vc.heads = 2;
  vc.encoder_blocks = 1;
  vc.decoder_blocks = 1;
  auto vae = MotionVae::create(vc, 2);
  vae.set_data_stats(RowVec::Zero(6), RowVec::Ones(6));
  vae.set_latent_stats(RowVec::Zero(4), RowVec::Ones(4));
  ContextAdapterConfig ac;
  ac.token_dim = 4;
  ac.heads = 2;
  ac.blocks = 1;
  SFlowModel sflow{VelocityNet::create(micro_net(4), seed), ContextAdapter::create(ac, 4), 1.0};
  return Pipeline{std::move(vae), VelocityNet::create(micro_net(4), 6),
                  PyramidSchedule::build(2, 4, {4, 2}, 1.0 / 3.0), std::move(sflow), 3, 0.0};
}

ToyDataConfig micro_data() {
  ToyDataConfig c;
  c.frames = 8;
  c.joints = 3;
  c.delay = 2;
  return c;
}
}  // namespace

TEST_CASE("mmd: identical sets and calibration") {
  Rng rng(1);
  const Mat a = rng.normal_matrix(300, 2);
  const auto same = mmd(a, a, 1.0);
  CHECK(std::abs(same.biased) < 1e-12);
  CHECK(same.bandwidth == 1.0);

  const Mat x = rng.normal_matrix(2000, 1), y = rng.normal_matrix(2000, 1);
  CHECK(std::abs(mmd(x, y).unbiased) < 0.01);
  const Mat shifted = (y.array() + 3.0).matrix();
  CHECK(mmd(x, shifted).unbiased > 0.1);
  CHECK(mmd(x, shifted).biased > mmd(x, y).biased);
}

TEST_CASE("mmd: closed form on two points") {
  const Mat a = (Mat(2, 1) << 0.0, 1.0).finished();
  const Mat b = (Mat(2, 1) << 2.0, 3.0).finished();
  const double h = 1.5, g = 1.0 / (2 * h * h);
  auto k = [&](double d) { return std::exp(-g * d * d); };
  // Kaa = Kbb = [1 k1; k1 1]; Kab distances 2, 3, 1, 2.
  const double biased = 2 * (2 + 2 * k(1)) / 4 - 2 * (2 * k(2) + k(3) + k(1)) / 4;
  const double unbiased = 2 * k(1) - 2 * (2 * k(2) + k(3) + k(1)) / 4;
  const auto r = mmd(a, b, h);
  CHECK(r.biased == doctest::Approx(biased).epsilon(1e-14));
  CHECK(r.unbiased == doctest::Approx(unbiased).epsilon(1e-14));
}

TEST_CASE("mmd: median heuristic") {
  const Mat p = (Mat(3, 1) << 0.0, 1.0, 3.0).finished();
  // squared distances 1, 9, 4 -> median 4 -> h = sqrt(2)
  CHECK(median_heuristic_bandwidth(p) == doctest::Approx(std::sqrt(2.0)));
  CHECK(median_heuristic_bandwidth(Mat::Zero(4, 2)) == 1.0);
  CHECK_THROWS_AS(mmd(Mat::Zero(1, 2), Mat::Zero(3, 2)), InvalidArgument);
}

TEST_CASE("jump: moments match the next stage and the half-alpha control does not") {
  const auto schedule = PyramidSchedule::build(3, 8, {4, 4, 4}, 1.0 / 3.0);
  Rng rng(3);
  const Mat z1 = rng.normal_matrix(8, 3);
  const auto report = jump_continuity_report(z1, schedule, 200000, 9, Tolerances{});
  INFO(report.text());
  CHECK(report.passed());
  int controls = 0;
  for (const auto& m : report.metrics)
    if (m.name.find("control") != std::string::npos) ++controls;
  CHECK(controls == 2);

  Rng r1(4), r2(4);
  const auto good = jump_moments(z1, schedule, 2, 20000, r1);
  const auto bad = jump_moments(z1, schedule, 2, 20000, r2, 0.5);
  CHECK(good.variance_error < 0.02);
  CHECK(bad.variance_error > 0.1);
  CHECK(bad.mean_error < 1e-2);
  CHECK_THROWS_AS(jump_continuity_report(z1, schedule, 100, 1, Tolerances{}), InvalidArgument);
}

TEST_CASE("solver order: first-order slope, exact on trivial fields") {
  const auto r = solver_order_report({8, 16, 32, 64, 128}, Tolerances{});
  INFO(r.text());
  CHECK(r.passed());
  CHECK(r.table.size() == 5);
  CHECK(r.metrics[0].value == doctest::Approx(-1.0).epsilon(0.1));
  Tolerances strict;
  strict.order_slope_min = -3.0;
  strict.order_slope_max = -2.0;
  CHECK_FALSE(solver_order_report({8, 16, 32}, strict).passed());
}

TEST_CASE("flops: ratio from the analytic count") {
  const auto schedule = PyramidSchedule::build(2, 16, {45, 5}, 1.0 / 3.0);
  auto cfg = micro_net(4);
  const auto r = flops_ratio_report(schedule, cfg, 1, 2, Tolerances{});
  double f_full = 0, f_pyr = 0;
  for (const auto& m : r.metrics) {
    if (m.name == "full_gflops") f_full = m.value;
    if (m.name == "pyramid_gflops") f_pyr = m.value;
    if (m.name == "single_stage_ratio") CHECK(m.pass());
  }
  const double expect = (45 * flops_estimate(8, cfg) + 5 * flops_estimate(16, cfg)) /
                        (50 * flops_estimate(16, cfg));
  CHECK(f_pyr / f_full == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("sign test") {
  CHECK(sign_test_p(0, 0) == 1.0);
  CHECK(sign_test_p(0, 10) == doctest::Approx(1.0));
  CHECK(sign_test_p(10, 10) == doctest::Approx(1.0 / 1024));
  CHECK(sign_test_p(9, 10) == doctest::Approx(11.0 / 1024));
  CHECK(sign_test_p(3, 4) == doctest::Approx(5.0 / 16));
  CHECK_THROWS_AS(sign_test_p(5, 4), InvalidArgument);
}

TEST_CASE("histogram features: fractions per joint sum to one") {
  const auto cfg = micro_data();
  const auto scenes = synthesize_dataset(20, 2, 5, cfg);
  const auto h = HistogramFeatures::fit(scenes, 4);
  CHECK(h.edges.size() == 3);
  CHECK(h.edges[0].size() == 3);
  const auto f = h.scene(scenes[0]);
  REQUIRE(f.size() == 2 * 3 * 4);
  for (std::size_t j = 0; j < f.size(); j += 4)
    CHECK(f[j] + f[j + 1] + f[j + 2] + f[j + 3] == doctest::Approx(1.0));
  const Mat m = h.matrix(scenes);
  CHECK(m.rows() == 20);
}

TEST_CASE("generation report: real data against itself sits at the floor") {
  const auto cfg = micro_data();
  const auto a = synthesize_dataset(40, 2, 11, cfg);
  const auto b = synthesize_dataset(40, 2, 12, cfg);
  const auto c = synthesize_dataset(40, 2, 13, cfg);
  const auto d = synthesize_dataset(40, 2, 14, cfg);
  const auto r = generation_report(c, d, a, b, Tolerances{});
  INFO(r.text());
  CHECK(r.passed());

  // Frozen agents are far from the real distribution.
  auto frozen = c;
  for (auto& s : frozen)
    for (auto& ag : s.agents) ag.rowwise() = RowVec(ag.row(0));
  CHECK_FALSE(generation_report(frozen, d, a, b, Tolerances{}).passed());
}

TEST_CASE("accumulation: shared prior, per-agent deviations") {
  const auto semi = micro_pipeline(3);
  const auto noise_free = micro_pipeline(4);
  const auto cfg = micro_data();
  const auto r1 = run_accumulation(semi, noise_free, 3, 6, 21, cfg, 1);
  const auto r2 = run_accumulation(semi, noise_free, 3, 6, 21, cfg, 3);
  REQUIRE(r1.semi.size() == 6);
  for (int i = 0; i < 6; ++i) {
    REQUIRE(r1.semi[i].size() == 3);
    CHECK(r1.semi[i][0] == r1.noise_free[i][0]);
    CHECK(r1.semi[i] == r2.semi[i]);
    CHECK(r1.noise_free[i] == r2.noise_free[i]);
    CHECK(r1.semi_scenes[i].agents[0] == r1.noise_free_scenes[i].agents[0]);
    const double dev = std::sqrt(
        (r1.semi_scenes[i].agents[2] - reaction_oracle(r1.semi_scenes[i].agents[1], cfg))
            .squaredNorm() /
        48.0);
    CHECK(r1.semi[i][2] == doctest::Approx(dev).epsilon(1e-12));
  }
  const auto truth = synthesize_dataset(6, 3, 1, cfg);
  const auto report = error_accumulation_report(r1, Tolerances{}, &truth);
  CHECK(report.table.size() == 3);
  bool found = false;
  for (const auto& m : report.metrics) found |= m.name == "sign_test_p_semi_better";
  CHECK(found);
  CHECK(report.text().find("95% CI") != std::string::npos);
}

TEST_CASE("report: text, csv and files") {
  EvalReport r;
  r.name = "demo";
  r.metrics.push_back(Metric::below("a", 0.5, 1.0, 3));
  r.metrics.push_back(Metric::info("b", 2.0, 3).with_ci(1.0, 3.0));
  r.table_header = {"x", "y"};
  r.table = {{1, 2}, {3, 4}};
  CHECK(r.passed());
  r.metrics.push_back(Metric::above("c", 0.5, 1.0, 3));
  CHECK_FALSE(r.passed());
  CHECK(Metric::within("w", 1.0, 1.0, 1.0, 1).pass());
  CHECK_FALSE(Metric::below("nan", std::nan(""), 1.0, 1).pass());
  CHECK(r.text().find("FAIL") != std::string::npos);
  CHECK(r.csv().find("x,y\n1,2\n3,4\n") != std::string::npos);
  const auto dir = fs::temp_directory_path() / "umf_eval_report";
  fs::remove_all(dir);
  r.write(dir);
  CHECK(fs::exists(dir / "demo.txt"));
  CHECK(fs::exists(dir / "demo.csv"));
  fs::remove_all(dir);

  Tolerances t;
  t.mmd_factor = 4.5;
  CHECK(Tolerances::from_json(t.to_json()).mmd_factor == 4.5);
}

TEST_CASE("svg plot is well formed") {
  const auto svg = svg_plot("t", "x", "y", {{"one", {0, 1, 2}, {1, 0, 2}}, {"two", {0, 2}, {0, 0}}});
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(svg.find("</svg>") != std::string::npos);
  std::size_t lines = 0;
  for (std::size_t p = svg.find("<polyline"); p != std::string::npos; p = svg.find("<polyline", p + 1))
    ++lines;
  CHECK(lines == 2);
  CHECK(svg_plot("empty", "x", "y", {}).find("</svg>") != std::string::npos);
}

TEST_CASE("parallel_for covers every index and propagates errors") {
  std::vector<int> hit(100, 0);
  parallel_for(100, 4, [&](int i) { hit[i] += 1; });
  for (int h : hit) CHECK(h == 1);
  CHECK_THROWS_AS(parallel_for(10, 3, [](int i) {
                    if (i == 7) throw std::runtime_error("boom");
                  }),
                  std::runtime_error);
}
