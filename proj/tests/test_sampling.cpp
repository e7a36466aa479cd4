#include <doctest.h>

#include "umf/errors.hpp"
#include "umf/resampling.hpp"
#include "umf/sampling.hpp"

#include <cmath>
#include <filesystem>
#include <limits>

using namespace umf;
namespace fs = std::filesystem;

namespace {
VelocityNetConfig micro_net(int r = 3) {
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

Mat& param(nn::ParamStore& s, const std::string& name) {
  for (std::size_t i = 0; i < s.size(); ++i)
    if (s.name(i) == name) return s.value(i);
  throw std::runtime_error("no parameter " + name);
}

// Output weights zeroed and the bias set: the field is the constant v everywhere.
VelocityNet constant_field(const RowVec& v) {
  auto net = VelocityNet::create(micro_net(static_cast<int>(v.size())), 1);
  param(net.params(), "token_out.weight").setZero();
  param(net.params(), "token_out.bias") = v;
  return net;
}

void perturb(nn::ParamStore& s, double scale, std::uint64_t seed) {
  Rng rng(seed);
  for (std::size_t i = 0; i < s.size(); ++i)
    s.value(i) += scale * rng.normal_matrix(s.value(i).rows(), s.value(i).cols());
}

Pipeline micro_pipeline() {
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
  SFlowModel sflow{VelocityNet::create(micro_net(4), 3), ContextAdapter::create(ac, 4), 1.0};
  perturb(sflow.adapter.params(), 0.1, 5);
  return Pipeline{std::move(vae), VelocityNet::create(micro_net(4), 6),
                  PyramidSchedule::build(2, 4, {4, 2}, 1.0 / 3.0), std::move(sflow), 3, 0.0};
}
}  // namespace

TEST_CASE("euler: constant field is integrated exactly") {
  const Mat x0 = (Mat(2, 2) << 1, 2, 3, 4).finished();
  const Mat v = (Mat(2, 2) << 0.5, -1, 0.25, 2).finished();
  const Field f = [&](const Mat&, double) { return v; };
  CHECK(euler_solve(f, x0, 0.0, 1.0, 1) == x0 + v);
  CHECK(euler_solve(f, x0, 0.25, 0.75, 1) == x0 + 0.5 * v);
  // Powers-of-two step counts keep the arithmetic exact.
  for (int m : {2, 4, 8, 64}) CHECK(euler_solve(f, x0, 0.0, 1.0, m) == x0 + v);
  CHECK(euler_solve([](const Mat& x, double) { return Mat(Mat::Zero(x.rows(), x.cols())); }, x0,
                    0.0, 1.0, 7) == x0);
}

TEST_CASE("euler: first-order convergence on x' = -x") {
  const Mat x0 = Mat::Constant(1, 1, 1.0);
  const Field f = [](const Mat& x, double) { return Mat(-x); };
  const double exact = std::exp(-1.0);
  const double e16 = std::abs(euler_solve(f, x0, 0.0, 1.0, 16)(0, 0) - exact);
  const double e32 = std::abs(euler_solve(f, x0, 0.0, 1.0, 32)(0, 0) - exact);
  CHECK(e16 / e32 == doctest::Approx(2.0).epsilon(0.2));
}

TEST_CASE("euler: grid and failure reporting") {
  std::vector<double> times;
  euler_solve([](const Mat& x, double) { return x; }, Mat::Zero(1, 1), 0.0, 1.0, 4, &times);
  CHECK(times == std::vector<double>{0.0, 0.25, 0.5, 0.75});
  int calls = 0;
  const Field bad = [&](const Mat& x, double) {
    return ++calls == 3 ? Mat::Constant(x.rows(), x.cols(), std::nan("")) : x;
  };
  try {
    euler_solve(bad, Mat::Ones(1, 1), 0.0, 1.0, 5);
    FAIL("expected a numeric error");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("step 2") != std::string::npos);
  }
  CHECK_THROWS_AS(euler_solve(bad, Mat::Ones(1, 1), 0.0, 1.0, 0), InvalidArgument);
  CHECK_THROWS_AS(euler_solve(bad, Mat::Ones(1, 1), 1.0, 1.0, 3), InvalidArgument);
}

TEST_CASE("single-stage prior equals a plain rectified-flow sampler bitwise") {
  const auto sched = PyramidSchedule::build(1, 8, {7}, 0.0);
  for (int i = 0; i < 20; ++i) {
    const auto net = VelocityNet::create(micro_net(4), 10 + i);
    const Condition cond{i % 2};
    Rng r1(100 + i), r2(100 + i);
    const Mat got = sample_prior(net, sched, cond, r1);
    // Direct loop: x ~ N(0, I), x_{m+1} = x_m + v(x_m, m / M) / M.
    Mat x = r2.normal_matrix(8, 4);
    const double dt = 1.0 / 7;
    for (int m = 0; m < 7; ++m) x = x + dt * net(x, 0.0 + m * dt, cond);
    CHECK(got == x);
  }
}

TEST_CASE("prior output is full resolution and seed deterministic") {
  const auto net = VelocityNet::create(micro_net(4), 20);
  for (int K : {1, 2, 3}) {
    std::vector<int> steps(K, 3);
    const auto sched = PyramidSchedule::build(K, 16, steps, K == 1 ? 0.0 : 0.5);
    Rng a(21), b(21);
    const Mat x = sample_prior(net, sched, Condition{1}, a);
    CHECK(x.rows() == 16);
    CHECK(x.cols() == 4);
    CHECK(x == sample_prior(net, sched, Condition{1}, b));
  }
}

TEST_CASE("prior with the exact conditional field recovers the data point") {
  // For a single data point z1 the field is known in closed form: within stage k the
  // state is mean(t') + (1 - t) eps_hat with a straight mean path, so eps_hat and the
  // velocity follow from the state alone.
  Rng data(30);
  const Mat z1 = data.normal_matrix(16, 3);
  for (int K : {2, 3}) {
    CAPTURE(K);
    std::vector<int> steps(K, 5);
    const auto sched = PyramidSchedule::build(K, 16, steps, K == 2 ? 1.0 / 3.0 : 0.5);
    auto end_mean = [&](int k) { return Mat(sched.window(k).end * downsample(z1, sched.factor(k))); };
    auto start_mean = [&](int k) -> Mat {
      const double s = sched.window(k).start;
      if (s == 0.0) return Mat::Zero(sched.length(k), 3);
      return s * upsample(downsample(z1, 2 * sched.factor(k)), 2);
    };
    const StageField exact = [&](const Mat& x, double t, int k) -> Mat {
      const auto& w = sched.window(k);
      const double tl = (t - w.start) / (w.end - w.start);
      const Mat mean = tl * end_mean(k) + (1.0 - tl) * start_mean(k);
      const Mat eps_hat = (x - mean) / (1.0 - t);
      return end_mean(k) - start_mean(k) + (w.start - w.end) * eps_hat;
    };
    Rng rng(31);
    PriorTrace trace;
    const Mat out = sample_prior(exact, sched, 3, rng, &trace);
    CHECK((out - z1).cwiseAbs().maxCoeff() < 1e-10);
    // At every stage end the state is the data term plus noise scaled by (1 - e_k).
    for (int i = 0; i < K; ++i) {
      const int k = K - i;
      const Mat resid = trace.stage_ends[i] - end_mean(k);
      const Mat resid_start = trace.stage_starts[i] - start_mean(k);
      const double shrink = (1.0 - sched.window(k).end) / (1.0 - sched.window(k).start);
      CHECK((resid - shrink * resid_start).cwiseAbs().maxCoeff() < 1e-10);
    }
  }
}

TEST_CASE("prior time grid: monotone within stages, covers [0, 1]") {
  const auto net = VelocityNet::create(micro_net(4), 40);
  const auto sched = PyramidSchedule::build(3, 16, {6, 4, 3}, 0.5);
  Rng rng(41);
  PriorTrace trace;
  sample_prior(net, sched, Condition{0}, rng, &trace);
  CHECK(trace.times.size() == 13);
  CHECK(trace.times.front() == 0.0);
  for (std::size_t i = 1; i < trace.times.size(); ++i) {
    CHECK(trace.stages[i] <= trace.stages[i - 1]);
    if (trace.stages[i] == trace.stages[i - 1]) CHECK(trace.times[i] > trace.times[i - 1]);
    else {
      // A jump restarts at the next window's start, which is never earlier than the previous one.
      CHECK(trace.times[i] == sched.window(trace.stages[i]).start);
      CHECK(sched.window(trace.stages[i]).start >= sched.window(trace.stages[i - 1]).start);
    }
  }
  // The last Euler step lands at e_1 = 1.
  CHECK(trace.times.back() + (1.0 - 0.5) / 3 == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(trace.stage_ends.back().rows() == 16);
  CHECK(trace.stage_starts.front().rows() == 4);
}

TEST_CASE("reaction sampling starts at the context") {
  Rng data(50);
  const Mat C = data.normal_matrix(4, 3);
  auto zero = VelocityNet::create(micro_net(), 51);
  param(zero.params(), "token_out.weight").setZero();
  std::vector<Mat> states;
  CHECK(sample_reaction(zero, C, Condition{0}, 10, nullptr, 0.0, &states) == C);
  CHECK(states.size() == 10);
  CHECK(states.front() == C);

  RowVec v(3);
  v << 0.5, -0.25, 2.0;
  const auto constant = constant_field(v);
  const Mat expect = C.rowwise() + v;
  CHECK((sample_reaction(constant, C, Condition{1}, 1) - expect).cwiseAbs().maxCoeff() < 1e-15);

  const auto trained = VelocityNet::create(micro_net(), 52);
  states.clear();
  sample_reaction(trained, C, Condition{0}, 4, nullptr, 0.0, &states);
  CHECK(states.front() == C);
  Rng rng(53);
  CHECK(sample_reaction(zero, C, Condition{0}, 4, &rng, 0.1) != C);
  CHECK_THROWS_AS(sample_reaction(zero, Mat::Zero(4, 2), Condition{0}, 4), InvalidArgument);
}

TEST_CASE("context adapter: single agent, duplicates and ordering") {
  Rng data(60);
  const Mat z1 = data.normal_matrix(4, 4), z2 = data.normal_matrix(4, 4),
            z3 = data.normal_matrix(4, 4);
  ContextAdapterConfig c;
  c.token_dim = 4;
  c.heads = 2;

  const auto fresh = ContextAdapter::create(c, 61);
  CHECK(build_context(fresh, {z1}) == z1);
  CHECK(build_context(fresh, {z1, z1}) == z1);
  CHECK((build_context(fresh, {z1, z2}) - 0.5 * (z1 + z2)).cwiseAbs().maxCoeff() < 1e-15);

  c.agent_ids = false;
  auto plain = ContextAdapter::create(c, 62);
  perturb(plain.params(), 0.3, 63);
  const Mat single = build_context(plain, {z1});
  CHECK(single != z1);
  CHECK((build_context(plain, {z1, z1}) - single).cwiseAbs().maxCoeff() < 1e-12);
  const Mat abc = build_context(plain, {z1, z2, z3});
  CHECK((build_context(plain, {z3, z1, z2}) - abc).cwiseAbs().maxCoeff() < 1e-12);

  c.agent_ids = true;
  auto ids = ContextAdapter::create(c, 62);
  perturb(ids.params(), 0.3, 63);
  const Mat ordered = build_context(ids, {z1, z2, z3});
  CHECK((build_context(ids, {z3, z1, z2}) - ordered).cwiseAbs().maxCoeff() > 1e-6);

  CHECK_THROWS_AS(build_context(ids, {}), InvalidArgument);
  CHECK_THROWS_AS(build_context(ids, {z1, Mat::Zero(2, 4)}), InvalidArgument);
}

TEST_CASE("scene generation call counts") {
  const auto models = micro_pipeline();
  Rng rng(70);
  const auto one = generate_scene(models, 1, Condition{0}, rng);
  CHECK(one.audit.pflow_calls == 1);
  CHECK(one.audit.sflow_calls == 0);
  CHECK(one.motions.size() == 1);

  const auto four = generate_scene(models, 4, Condition{1}, rng);
  CHECK(four.audit.pflow_calls == 1);
  CHECK(four.audit.sflow_calls == 3);
  CHECK(four.audit.context_sizes == std::vector<int>{1, 2, 3});
  CHECK(four.motions.size() == 4);
  CHECK(four.motions[3].rows() == 8);
  CHECK(four.motions[3].cols() == 6);

  Rng a = scene_rng(71, 5), b = scene_rng(71, 5);
  const auto s1 = generate_scene(models, 2, Condition{0}, a);
  const auto s2 = generate_scene(models, 2, Condition{0}, b);
  CHECK(s1.latents == s2.latents);
  CHECK(s1.motions == s2.motions);
  CHECK_THROWS_AS(generate_scene(models, 0, Condition{0}, a), InvalidArgument);
}

TEST_CASE("sample file round trip and errors") {
  const auto models = micro_pipeline();
  std::vector<Scene> scenes;
  for (int i = 0; i < 3; ++i) {
    Rng rng = scene_rng(80, i);
    auto g = generate_scene(models, 2, Condition{i % 2}, rng);
    scenes.push_back(Scene{g.motions, i % 2});
  }
  SampleMeta meta;
  meta.seed = 80;
  meta.n_agents = 2;
  meta.prior_steps = {4, 2};
  meta.reaction_steps = 3;
  meta.vae_hash = "a";
  meta.pflow_hash = "b";
  meta.sflow_hash = "c";
  const fs::path dir = fs::temp_directory_path() / "umf_test_sampling";
  fs::create_directories(dir);
  save_samples(dir / "s.umfs", scenes, meta);
  const auto [back, m] = load_samples(dir / "s.umfs");
  CHECK(back.size() == 3);
  CHECK(back[2].label == 0);
  CHECK(back[1].agents[1] == scenes[1].agents[1].cast<float>().cast<double>());
  CHECK(m.to_json() == meta.to_json());

  Dataset d = Dataset::from_scenes(scenes);
  save_dataset(d, dir / "d.umfd");
  try {
    load_samples(dir / "d.umfd");
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(e.kind() == FormatErrorKind::BadMagic);
  }
  CHECK_THROWS_AS(load_pipeline(dir / "nope.umfw", dir / "nope.umfw", dir / "nope.umfw"),
                  MissingArtifact);
  fs::remove_all(dir);
}
