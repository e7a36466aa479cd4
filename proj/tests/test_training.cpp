#include <doctest.h>

#include "gradcheck.hpp"
#include "umf/checkpoint.hpp"
#include "umf/errors.hpp"
#include "umf/flow_paths.hpp"
#include "umf/training.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

using namespace umf;
namespace fs = std::filesystem;

namespace {
VelocityNetConfig micro_net(bool zero_out = false) {
  VelocityNetConfig c;
  c.token_dim = 4;
  c.d_model = 8;
  c.heads = 2;
  c.blocks = 1;
  c.num_classes = 2;
  c.time_features = 4;
  c.zero_init_output = zero_out;
  return c;
}

ContextAdapterConfig micro_adapter() {
  ContextAdapterConfig c;
  c.token_dim = 4;
  c.heads = 2;
  c.blocks = 1;
  c.max_agents = 4;
  return c;
}

// Single scalar parameter store for optimizer checks.
struct Scalar {
  nn::ParamStore store;
  Scalar(double w) { store.add("w", Mat::Constant(1, 1, w)); }
  double& w() { return store.value(0)(0, 0); }
  void set_grad(double g) { store.grad(0)(0, 0) = g; }
};

LatentScenes random_latents(int scenes, int agents, int p, int r, std::uint64_t seed) {
  Rng rng(seed);
  LatentScenes d;
  for (int s = 0; s < scenes; ++s) {
    std::vector<Mat> a;
    for (int i = 0; i < agents; ++i) a.push_back(rng.normal_matrix(p, r));
    d.latents.push_back(std::move(a));
    d.labels.push_back(rng.uniform_int(2));
  }
  return d;
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("umf_test_training_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}
}  // namespace

TEST_CASE("adamw: zero gradient with no decay leaves parameters unchanged") {
  Scalar s(0.7);
  AdamW opt({&s.store}, {.lr = 0.1, .total_steps = 10});
  for (int i = 0; i < 5; ++i) {
    s.set_grad(0.0);
    CHECK(opt.step(i));
  }
  CHECK(s.w() == 0.7);
}

TEST_CASE("adamw: first step has magnitude lr") {
  Scalar s(1.0);
  AdamW opt({&s.store}, {.lr = 0.1, .total_steps = 1000000});
  s.set_grad(s.w());  // f = w^2 / 2
  opt.step(0);
  const double dw = s.w() - 1.0;
  CHECK(dw < 0.0);
  CHECK(std::abs(dw) <= 0.1 * (1.0 + 1e-6));
  CHECK(std::abs(dw) == doctest::Approx(0.1).epsilon(1e-6));
}

TEST_CASE("adamw: quadratic bowl converges") {
  nn::ParamStore store;
  const Mat center = (Mat(2, 2) << 1.5, -2.0, 0.25, 3.0).finished();
  const Mat scales = (Mat(2, 2) << 1.0, 4.0, 0.5, 2.0).finished();
  store.add("w", Mat::Zero(2, 2));
  AdamW opt({&store}, {.lr = 0.05, .total_steps = 2000});
  for (int i = 0; i < 2000; ++i) {
    store.grad(0) = scales.cwiseProduct(store.value(0) - center);
    opt.step(i);
  }
  CHECK((store.value(0) - center).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("adamw: cosine schedule and decoupled decay") {
  Scalar s(2.0);
  AdamW opt({&s.store}, {.lr = 0.1, .weight_decay = 0.5, .total_steps = 4});
  CHECK(opt.lr_at(0) == 0.1);
  CHECK(opt.lr_at(2) == doctest::Approx(0.05).epsilon(1e-15));
  CHECK(std::abs(opt.lr_at(4)) < 1e-17);
  // With a zero gradient only the decay acts: w <- w (1 - lr wd).
  s.set_grad(0.0);
  opt.step(0);
  CHECK(s.w() == doctest::Approx(2.0 * (1.0 - 0.05)).epsilon(1e-15));
}

TEST_CASE("adamw: non-finite gradients skip the step") {
  Scalar s(1.0);
  AdamW opt({&s.store}, {.lr = 0.1, .total_steps = 10});
  s.set_grad(std::numeric_limits<double>::quiet_NaN());
  CHECK_FALSE(opt.step(0));
  CHECK(s.w() == 1.0);
  CHECK(opt.skipped() == 1);
  CHECK(opt.updates() == 0);
  s.set_grad(std::numeric_limits<double>::infinity());
  CHECK_FALSE(opt.step(1));
  // The next finite step is the first applied update, so it is bias-corrected as such.
  s.set_grad(1.0);
  CHECK(opt.step(2));
  CHECK(opt.updates() == 1);
  CHECK(std::abs(1.0 - s.w()) == doctest::Approx(opt.lr_at(2)).epsilon(1e-6));
}

TEST_CASE("pflow loss at zero init equals the mean squared target") {
  const auto net = VelocityNet::create(micro_net(true), 1);
  const auto sched = PyramidSchedule::build(2, 8, {3, 2}, 1.0 / 3.0);
  Rng data(2);
  std::vector<Mat> z1;
  for (int i = 0; i < 5; ++i) z1.push_back(data.normal_matrix(8, 4));
  const std::vector<int> labels{0, 1, 0, 1, 1};
  Rng r1(3), r2(3);
  const auto batch = make_pflow_batch(z1, labels, sched, r1, StageSampling::UniformStage);
  double expect = 0.0;
  for (const auto& t : batch.targets) expect += t.squaredNorm() / static_cast<double>(t.size());
  expect /= 5.0;
  ag::Tape tape;
  nn::Binder b(tape, net.params());
  const double loss =
      ag::scalar(pflow_loss(b, net, z1, labels, sched, r2, StageSampling::UniformStage));
  CHECK(loss == doctest::Approx(expect).epsilon(1e-13));
  // Both resolutions appear with a target of the matching length.
  for (std::size_t i = 0; i < batch.stages.size(); ++i)
    CHECK(batch.targets[i].rows() == sched.length(batch.stages[i]));
}

TEST_CASE("single-stage pflow batch equals a rectified-flow batch on shared draws") {
  const auto sched = PyramidSchedule::build(1, 8, {10}, 0.0);
  const auto net = VelocityNet::create(micro_net(), 4);
  Rng data(5);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Mat> z1;
    std::vector<int> labels;
    for (int i = 0; i < 3; ++i) {
      z1.push_back(data.normal_matrix(8, 4));
      labels.push_back(i % 2);
    }
    Rng r1(100 + trial), r2(100 + trial);
    const auto batch = make_pflow_batch(z1, labels, sched, r1, StageSampling::UniformStage);
    // Standalone rectified flow: x_t = t z1 + (1 - t) eps, target z1 - eps.
    double oracle_loss = 0.0;
    for (int i = 0; i < 3; ++i) {
      r2.uniform_int(1);  // the stage draw, a single choice
      const double t = r2.uniform();
      const Mat eps = r2.normal_matrix(8, 4);
      const Mat x = t * z1[i] + (1.0 - t) * eps;
      const Mat u = z1[i] - eps;
      CHECK(batch.times[i] == t);
      CHECK(batch.points[i] == x);
      CHECK(batch.targets[i] == u);
      const Mat v = net(x, t, Condition{labels[i]});
      oracle_loss += (v - u).squaredNorm() / static_cast<double>(u.size());
    }
    oracle_loss /= 3.0;
    ag::Tape tape;
    nn::Binder b(tape, net.params());
    CHECK(std::abs(ag::scalar(flow_regression_loss(b, net, batch)) - oracle_loss) < 1e-14);
  }
}

TEST_CASE("stage sampling covers every stage evenly") {
  const auto sched = PyramidSchedule::build(3, 16, {30, 15, 5}, 0.5);
  std::vector<Mat> z1(1, Mat::Zero(16, 2));
  const std::vector<int> labels{0};
  Rng rng(6);
  const int draws = 10000;
  std::vector<int> counts(4, 0);
  for (int i = 0; i < draws; ++i) {
    const auto b = make_pflow_batch(z1, labels, sched, rng, StageSampling::UniformStage);
    ++counts[b.stages[0]];
    const auto& w = sched.window(b.stages[0]);
    CHECK(b.times[0] >= w.start);
    CHECK(b.times[0] <= w.end);
  }
  const double p = 1.0 / 3.0;
  const double sigma = std::sqrt(draws * p * (1 - p));
  for (int k = 1; k <= 3; ++k) CHECK(std::abs(counts[k] - draws * p) < 3 * sigma);

  // Uniform time mode: global time is uniform and the stage window contains it.
  double mean_t = 0.0;
  for (int i = 0; i < draws; ++i) {
    const auto b = make_pflow_batch(z1, labels, sched, rng, StageSampling::UniformTime);
    const auto& w = sched.window(b.stages[0]);
    CHECK(b.times[0] >= w.start);
    CHECK(b.times[0] <= w.end);
    mean_t += b.times[0] / draws;
  }
  CHECK(std::abs(mean_t - 0.5) < 3 * std::sqrt(1.0 / 12.0 / draws));
}

TEST_CASE("sflow loss closed forms at zero init") {
  const auto net = VelocityNet::create(micro_net(true), 7);
  Rng data(8);
  std::vector<Mat> W, C;
  for (int i = 0; i < 3; ++i) {
    W.push_back(data.normal_matrix(4, 4));
    C.push_back(data.normal_matrix(4, 4));
  }
  Mat Cs(12, 4);
  Cs << C[0], C[1], C[2];
  const std::vector<int> labels{0, 1, 0};
  for (double lambda : {0.0, 1.0, 0.3}) {
    CAPTURE(lambda);
    Rng r1(9), r2(9);
    ag::Tape tape;
    nn::Binder b(tape, net.params());
    const auto loss = sflow_loss(b, net, tape.constant(Cs), W, labels, r1, lambda);
    // Replay the draws: two times per sample, then the noise.
    for (int i = 0; i < 6; ++i) r2.uniform();
    const Mat eps = r2.normal_matrix(12, 4);
    double trans = 0.0;
    for (int i = 0; i < 3; ++i) trans += (W[i] - C[i]).squaredNorm();
    trans /= 48.0;
    const double recon = (Cs - eps).squaredNorm() / 48.0;
    CHECK(ag::scalar(loss.trans) == doctest::Approx(trans).epsilon(1e-14));
    CHECK(ag::scalar(loss.recon) == doctest::Approx(recon).epsilon(1e-14));
    CHECK(ag::scalar(loss.total) == doctest::Approx(trans + lambda * recon).epsilon(1e-14));
  }
}

TEST_CASE("sflow: context equal to the reaction gives a zero transport gradient at zero init") {
  auto net = VelocityNet::create(micro_net(true), 10);
  Rng data(11);
  std::vector<Mat> W{data.normal_matrix(4, 4), data.normal_matrix(4, 4)};
  Mat Cs(8, 4);
  Cs << W[0], W[1];
  net.params().zero_grad();
  ag::Tape tape;
  nn::Binder b(tape, net.params(), true);
  Rng rng(12);
  const auto loss = sflow_loss(b, net, tape.constant(Cs), W, {0, 1}, rng, 0.0);
  CHECK(ag::scalar(loss.trans) == 0.0);
  tape.backward(loss.total);
  for (std::size_t i = 0; i < net.params().size(); ++i)
    CHECK(net.params().grad(i).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("pflow and sflow gradients match central differences") {
  const auto sched = PyramidSchedule::build(2, 4, {3, 2}, 1.0 / 3.0);
  Rng data(13);
  std::vector<Mat> z1{data.normal_matrix(4, 4), data.normal_matrix(4, 4)};
  const std::vector<int> labels{0, 1};
  auto net = VelocityNet::create(micro_net(), 14);
  {
    const auto res = gradcheck::check_params(net.params(), [&](nn::Binder& b) {
      Rng rng(15);
      return pflow_loss(b, net, z1, labels, sched, rng, StageSampling::UniformStage);
    });
    CAPTURE(res.worst);
    CHECK(res.checked > 40);
    CHECK(res.max_rel_error < 1e-4);
  }

  auto adapter = ContextAdapter::create(micro_adapter(), 16);
  // Move the adapter off its zero-residual start so every parameter matters.
  Rng perturb(17);
  for (std::size_t i = 0; i < adapter.params().size(); ++i)
    adapter.params().value(i) += 0.2 * perturb.normal_matrix(adapter.params().value(i).rows(),
                                                              adapter.params().value(i).cols());
  const std::vector<std::vector<Mat>> contexts{{data.normal_matrix(4, 4)},
                                               {data.normal_matrix(4, 4), data.normal_matrix(4, 4)}};
  const std::vector<Mat> reactions{data.normal_matrix(4, 4), data.normal_matrix(4, 4)};
  auto sflow = [&](nn::Binder& bn, nn::Binder& ba) {
    Rng rng(18);
    return sflow_loss(bn, net, adapter.forward(ba, contexts), reactions, labels, rng, 0.7).total;
  };
  {
    const auto res = gradcheck::check_params(net.params(), [&](nn::Binder& b) {
      nn::Binder ba(b.tape(), adapter.params());
      return sflow(b, ba);
    });
    CAPTURE(res.worst);
    CHECK(res.max_rel_error < 1e-4);
  }
  {
    const auto res = gradcheck::check_params(adapter.params(), [&](nn::Binder& b) {
      nn::Binder bn(b.tape(), net.params());
      return sflow(bn, b);
    });
    CAPTURE(res.worst);
    CHECK(res.checked > 20);
    CHECK(res.max_rel_error < 1e-4);
  }
}

TEST_CASE("single pair overfits with one stage") {
  const auto sched = PyramidSchedule::build(1, 4, {10}, 0.0);
  VelocityNetConfig c = micro_net();
  c.d_model = 16;
  auto net = VelocityNet::create(c, 19);
  Rng data(20);
  const Mat z1 = data.normal_matrix(4, 4);
  const Mat eps = data.normal_matrix(4, 4);
  AdamW opt({&net.params()}, {.lr = 3e-3, .total_steps = 2000});
  double loss = 0.0;
  for (int step = 0; step < 2000; ++step) {
    net.params().zero_grad();
    Rng rng = Rng::derive(21, {static_cast<std::uint64_t>(step)});
    FlowBatch batch;
    for (int i = 0; i < 8; ++i) {
      const double t = rng.uniform();
      auto s = pyramid_point_and_target(z1, eps, 1, t, sched);
      batch.points.push_back(s.point);
      batch.targets.push_back(s.target);
      batch.times.push_back(t);
      batch.labels.push_back(0);
      batch.stages.push_back(1);
    }
    ag::Tape tape;
    nn::Binder b(tape, net.params(), true);
    const auto l = flow_regression_loss(b, net, batch);
    tape.backward(l);
    loss = ag::scalar(l);
    opt.step(step);
  }
  CHECK(loss < 1e-3);
}

TEST_CASE("training runs resume bitwise and log increasing steps") {
  const auto data = random_latents(12, 3, 4, 4, 22);
  const auto sched = PyramidSchedule::build(2, 4, {3, 2}, 1.0 / 3.0);
  TrainConfig tc;
  tc.lr = 1e-3;
  tc.steps = 12;
  tc.batch_size = 4;
  tc.seed = 23;

  const auto dir = temp_dir("resume");
  TrainOutputs full{dir / "full.umfw", dir / "full.csv", dir / "full.state"};
  TrainLog full_log;
  train_pflow(data, micro_net(), sched, tc, full, &full_log);
  CHECK(full_log.completed);
  CHECK(full_log.steps.size() == 12);
  for (std::size_t i = 1; i < full_log.steps.size(); ++i)
    CHECK(full_log.steps[i] > full_log.steps[i - 1]);

  TrainOutputs part{dir / "part.umfw", dir / "part.csv", dir / "part.state"};
  TrainConfig first = tc;
  first.stop_after = 5;
  TrainLog log1;
  train_pflow(data, micro_net(), sched, first, part, &log1);
  CHECK_FALSE(log1.completed);
  CHECK_FALSE(fs::exists(part.checkpoint));
  TrainLog log2;
  train_pflow(data, micro_net(), sched, tc, part, &log2);
  CHECK(log2.completed);
  CHECK(log2.values == full_log.values);
  CHECK(slurp(part.loss_csv) == slurp(full.loss_csv));
  CHECK(slurp(part.checkpoint) == slurp(full.checkpoint));

  // CSV layout: header then one row per step.
  std::istringstream csv(slurp(full.loss_csv));
  std::string line;
  std::getline(csv, line);
  CHECK(line == "step,lr,loss");
  int rows = 0;
  while (std::getline(csv, line)) ++rows;
  CHECK(rows == 12);

  // A state from another seed is rejected.
  TrainConfig other = tc;
  other.seed = 24;
  CHECK_THROWS_AS(train_pflow(data, micro_net(), sched, other, part), InvalidArgument);
  fs::remove_all(dir);
}

TEST_CASE("sflow training resumes bitwise and is seed deterministic") {
  const auto data = random_latents(10, 4, 4, 4, 25);
  TrainConfig tc;
  tc.lr = 1e-3;
  tc.steps = 8;
  tc.batch_size = 3;
  tc.seed = 26;
  const auto dir = temp_dir("sflow");
  TrainOutputs a{dir / "a.umfw", dir / "a.csv", {}};
  TrainOutputs b{dir / "b.umfw", dir / "b.csv", dir / "b.state"};
  TrainLog la, lb;
  train_sflow(data, micro_net(), micro_adapter(), tc, a, &la);
  TrainConfig first = tc;
  first.stop_after = 3;
  first.state_every = 1;
  train_sflow(data, micro_net(), micro_adapter(), first, b);
  train_sflow(data, micro_net(), micro_adapter(), tc, b, &lb);
  CHECK(la.columns == std::vector<std::string>{"total", "trans", "recon"});
  CHECK(la.values == lb.values);
  CHECK(io::file_hash(a.checkpoint) == io::file_hash(b.checkpoint));

  const auto model = sflow_from_checkpoint(Checkpoint::load(a.checkpoint));
  CHECK(model.lambda_recon == 1.0);
  CHECK(model.adapter.config().max_agents == 4);

  // With the reconstruction weight at zero the recon column is still logged.
  TrainConfig nf = tc;
  nf.lambda_recon = 0.0;
  TrainLog ln;
  train_sflow(data, micro_net(), micro_adapter(), nf, {}, &ln);
  for (const auto& row : ln.values) {
    CHECK(row[0] == row[1]);
    CHECK(row[2] > 0.0);
  }
  fs::remove_all(dir);
}

TEST_CASE("vae training reduces its loss and keeps KL non-negative") {
  MotionVaeConfig c;
  c.frames = 16;
  c.latent_tokens = 4;
  c.latent_dim = 4;
  c.internal_dim = 8;
  c.d_model = 16;
  c.heads = 2;
  c.encoder_blocks = 1;
  c.decoder_blocks = 1;
  ToyDataConfig dc;
  dc.frames = 16;
  dc.delay = 2;
  auto train = Dataset::from_scenes(synthesize_dataset(32, 2, 27, dc));
  TrainConfig tc;
  tc.lr = 3e-3;
  tc.steps = 60;
  tc.batch_size = 16;
  tc.seed = 28;
  TrainLog log;
  const auto vae = train_vae(train, c, tc, {}, &log);
  double first = 0, last = 0;
  for (int i = 0; i < 10; ++i) {
    first += log.values[i][0];
    last += log.values[50 + i][0];
  }
  CHECK(last < 0.7 * first);
  for (const auto& row : log.values) CHECK(row[2] >= 0.0);
  // Latent statistics are fitted on completion.
  CHECK(vae.latent_std().minCoeff() > 0.0);
  const auto latents = encode_latents(vae, train);
  CHECK(latents.latents.size() == 32);
  CHECK(latents.latents[0].size() == 2);
  CHECK(latents.latents[0][0].rows() == 4);
}

TEST_CASE("training config validation") {
  TrainConfig tc;
  tc.lr = 0.0;
  CHECK_THROWS_AS(tc.validate(), InvalidArgument);
  tc = {};
  tc.lambda_recon = -1;
  CHECK_THROWS_AS(tc.validate(), InvalidArgument);
  CHECK(stage_sampling_from_string(to_string(StageSampling::UniformTime)) ==
        StageSampling::UniformTime);
  CHECK_THROWS_AS(stage_sampling_from_string("random"), InvalidArgument);
}
