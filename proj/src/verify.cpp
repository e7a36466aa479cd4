#include "umf/verify.hpp"

#include "umf/context_adapter.hpp"
#include "umf/errors.hpp"
#include "umf/flow_paths.hpp"
#include "umf/motion_vae.hpp"
#include "umf/resampling.hpp"
#include "umf/sampling.hpp"
#include "umf/training.hpp"

#include <algorithm>
#include <cmath>

namespace umf {

GradientCheck check_gradients(nn::ParamStore& store,
                              const std::function<ag::Var(nn::Binder&)>& loss, int per_param,
                              double h) {
  store.zero_grad();
  {
    ag::Tape tape;
    nn::Binder b(tape, store, true);
    tape.backward(loss(b));
  }
  auto eval = [&]() {
    ag::Tape tape;
    nn::Binder b(tape, store, false);
    return ag::scalar(loss(b));
  };
  GradientCheck r;
  for (std::size_t p = 0; p < store.size(); ++p) {
    Mat& v = store.value(p);
    const Eigen::Index stride = std::max<Eigen::Index>(1, v.size() / per_param);
    for (Eigen::Index i = 0; i < v.size(); i += stride) {
      const double orig = v.data()[i];
      v.data()[i] = orig + h;
      const double up = eval();
      v.data()[i] = orig - h;
      const double down = eval();
      v.data()[i] = orig;
      const double numeric = (up - down) / (2 * h);
      const double analytic = store.grad(p).data()[i];
      const double mag = std::abs(analytic) + std::abs(numeric);
      const double err = mag < 1e-8 ? 0.0 : std::abs(analytic - numeric) / mag;
      if (err > r.max_rel_error) {
        r.max_rel_error = err;
        r.worst = store.name(p) + "[" + std::to_string(i) + "]";
      }
      ++r.checked;
    }
  }
  return r;
}

namespace {

template <class F>
double bisect(F f, double lo, double hi) {
  const bool lo_neg = f(lo) < 0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    if ((f(mid) < 0) == lo_neg)
      lo = mid;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

VelocityNetConfig micro_net(int classes) {
  VelocityNetConfig c;
  c.token_dim = 4;
  c.d_model = 8;
  c.heads = 2;
  c.blocks = 1;
  c.num_classes = classes;
  c.time_features = 4;
  c.zero_init_output = false;
  return c;
}

}  // namespace

EvalReport verify_closed_forms() {
  EvalReport r;
  r.name = "closed_forms";
  r.notes.push_back("Carried noise std c solves c^2 / ((1-s)^2 - c^2) = 1/3 (the corrective block "
                    "correlation), e solves (s/e)(1-e) = c, alpha^2 = (1-s)^2 - c^2.");
  r.table_header = {"s", "e_closed", "e_numeric", "alpha_closed", "alpha_numeric"};
  double worst_e = 0.0, worst_a = 0.0;
  for (double s : {0.1, 1.0 / 3.0, 0.5, 0.9}) {
    const double v = (1 - s) * (1 - s);
    const double c = bisect([&](double c) { return c * c / (v - c * c) - 1.0 / 3.0; }, 0.0,
                            (1 - s) * 0.999);
    const double e = bisect([&](double e) { return (s / e) * (1 - e) - c; }, s, 1.0);
    const double alpha = std::sqrt(v - c * c);
    const double ce = chained_end(s), ca = jump_coefficients(s).alpha;
    worst_e = std::max(worst_e, std::abs(ce - e));
    worst_a = std::max(worst_a, std::abs(ca - alpha));
    r.table.push_back({s, ce, e, ca, alpha});
  }
  r.metrics.push_back(Metric::below("window_end_max_error", worst_e, 1e-12, 4));
  r.metrics.push_back(Metric::below("alpha_max_error", worst_a, 1e-12, 4));
  return r;
}

EvalReport verify_single_stage(int cases, std::uint64_t seed) {
  UMF_REQUIRE(cases >= 1, "verify: cases must be >= 1");
  const auto sched = PyramidSchedule::build(1, 8, {7}, 0.0);
  int train_mismatch = 0, sample_mismatch = 0;
  for (int c = 0; c < cases; ++c) {
    const auto net = VelocityNet::create(micro_net(2), seed + static_cast<std::uint64_t>(c));
    Rng data = Rng::derive(seed, {1, static_cast<std::uint64_t>(c)});
    std::vector<Mat> z1{data.normal_matrix(8, 4), data.normal_matrix(8, 4)};
    const std::vector<int> labels{0, 1};
    Rng r1 = Rng::derive(seed, {2, static_cast<std::uint64_t>(c)}), r2 = r1;
    const auto batch = make_pflow_batch(z1, labels, sched, r1, StageSampling::UniformStage);
    for (int i = 0; i < 2; ++i) {
      r2.uniform_int(1);
      const double t = r2.uniform();
      const Mat eps = r2.normal_matrix(8, 4);
      if (batch.times[i] != t || batch.points[i] != t * z1[i] + (1.0 - t) * eps ||
          batch.targets[i] != z1[i] - eps)
        ++train_mismatch;
    }
    Rng s1 = Rng::derive(seed, {3, static_cast<std::uint64_t>(c)}), s2 = s1;
    const Condition cond{c % 2};
    const Mat got = sample_prior(net, sched, cond, s1);
    Mat x = s2.normal_matrix(8, 4);
    const double dt = 1.0 / 7;
    for (int m = 0; m < 7; ++m) x = x + dt * net(x, m * dt, cond);
    if (got != x) ++sample_mismatch;
  }
  EvalReport r;
  r.name = "single_stage";
  r.notes.push_back("K = 1 against x_t = t z1 + (1-t) eps, target z1 - eps, and a direct Euler loop.");
  r.inputs = {{"cases", std::to_string(cases)}, {"seed", std::to_string(seed)}};
  r.metrics.push_back(Metric::within("training_mismatches", train_mismatch, 0, 0, 2 * cases));
  r.metrics.push_back(Metric::within("sampling_mismatches", sample_mismatch, 0, 0, cases));
  return r;
}

EvalReport verify_resampling(std::uint64_t seed) {
  Rng rng(seed);
  const Mat x = rng.normal_matrix(16, 3);
  const double roundtrip = (downsample(upsample(x, 2), 2) - x).cwiseAbs().maxCoeff();
  const double roundtrip4 = (downsample(upsample(x, 4), 4) - x).cwiseAbs().maxCoeff();
  const double composed = (downsample(downsample(x, 2), 2) - downsample(x, 4)).cwiseAbs().maxCoeff();

  const int draws = 40000;
  double s00 = 0, s11 = 0, s01 = 0, s12 = 0;
  for (int i = 0; i < draws; ++i) {
    const Mat n = sample_correlated_noise(4, 1, 2, rng);
    s00 += n(0, 0) * n(0, 0);
    s11 += n(1, 0) * n(1, 0);
    s01 += n(0, 0) * n(1, 0);
    s12 += n(1, 0) * n(2, 0);
  }
  EvalReport r;
  r.name = "resampling";
  r.notes.push_back("Upsample then downsample is the identity; corrective noise has unit variance, "
                    "-1/3 correlation inside a block and none across blocks.");
  r.inputs = {{"seed", std::to_string(seed)}, {"draws", std::to_string(draws)}};
  r.metrics.push_back(Metric::within("down_up_factor2_error", roundtrip, 0, 0, 1));
  r.metrics.push_back(Metric::within("down_up_factor4_error", roundtrip4, 0, 0, 1));
  r.metrics.push_back(Metric::below("down_composition_error", composed, 1e-15, 1));
  const double n = draws;
  r.metrics.push_back(
      Metric::below("variance_error", std::max(std::abs(s00 / n - 1), std::abs(s11 / n - 1)), 0.03, draws));
  r.metrics.push_back(Metric::below("within_block_error", std::abs(s01 / n + 1.0 / 3.0), 0.02, draws));
  r.metrics.push_back(Metric::below("across_block_error", std::abs(s12 / n), 0.02, draws));
  return r;
}

EvalReport verify_gradients(int cases, std::uint64_t seed, const Tolerances& tol) {
  UMF_REQUIRE(cases >= 1, "verify: cases must be >= 1");
  double vae_err = 0, pflow_err = 0, sflow_err = 0, adapter_err = 0;
  std::int64_t vae_n = 0, pflow_n = 0, sflow_n = 0, adapter_n = 0;
  for (int c = 0; c < cases; ++c) {
    const std::uint64_t cs = seed + 100 * static_cast<std::uint64_t>(c);
    Rng data(cs);

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
    auto vae = MotionVae::create(vc, cs + 1);
    RowVec scale(6);
    for (int d = 0; d < 6; ++d) scale(d) = 1.0 + 0.2 * data.uniform();
    vae.set_data_stats(0.1 * data.normal_matrix(1, 6), scale);
    std::vector<Mat> motions{data.normal_matrix(8, 6), data.normal_matrix(8, 6)};
    const auto gv = check_gradients(vae.params(), [&](nn::Binder& b) {
      Rng rng(cs + 2);
      return vae_loss(b, vae, motions, rng, 0.1).total;
    });
    vae_err = std::max(vae_err, gv.max_rel_error);
    vae_n += gv.checked;

    const auto sched = PyramidSchedule::build(2, 4, {3, 2}, 1.0 / 3.0);
    std::vector<Mat> z1{data.normal_matrix(4, 4), data.normal_matrix(4, 4)};
    const std::vector<int> labels{0, 1};
    auto net = VelocityNet::create(micro_net(2), cs + 3);
    const auto gp = check_gradients(net.params(), [&](nn::Binder& b) {
      Rng rng(cs + 4);
      return pflow_loss(b, net, z1, labels, sched, rng, StageSampling::UniformStage);
    });
    pflow_err = std::max(pflow_err, gp.max_rel_error);
    pflow_n += gp.checked;

    ContextAdapterConfig ac;
    ac.token_dim = 4;
    ac.heads = 2;
    ac.blocks = 1;
    ac.max_agents = 4;
    auto adapter = ContextAdapter::create(ac, cs + 5);
    for (std::size_t i = 0; i < adapter.params().size(); ++i) {
      auto& v = adapter.params().value(i);
      v += 0.2 * data.normal_matrix(v.rows(), v.cols());
    }
    const std::vector<std::vector<Mat>> contexts{
        {data.normal_matrix(4, 4)}, {data.normal_matrix(4, 4), data.normal_matrix(4, 4)}};
    const std::vector<Mat> reactions{data.normal_matrix(4, 4), data.normal_matrix(4, 4)};
    auto sflow = [&](nn::Binder& bn, nn::Binder& ba) {
      Rng rng(cs + 6);
      return sflow_loss(bn, net, adapter.forward(ba, contexts), reactions, labels, rng, 0.7).total;
    };
    const auto gs = check_gradients(net.params(), [&](nn::Binder& b) {
      nn::Binder ba(b.tape(), adapter.params());
      return sflow(b, ba);
    });
    sflow_err = std::max(sflow_err, gs.max_rel_error);
    sflow_n += gs.checked;
    const auto ga = check_gradients(adapter.params(), [&](nn::Binder& b) {
      nn::Binder bn(b.tape(), net.params());
      return sflow(bn, b);
    });
    adapter_err = std::max(adapter_err, ga.max_rel_error);
    adapter_n += ga.checked;
  }
  EvalReport r;
  r.name = "gradients";
  r.notes.push_back("Analytic gradients against central differences (h = 1e-5) in double precision "
                    "on micro-models; relative error |a - n| / (|a| + |n|).");
  r.inputs = {{"cases", std::to_string(cases)}, {"seed", std::to_string(seed)}};
  r.metrics.push_back(Metric::below("vae_loss", vae_err, tol.gradient_rel, vae_n));
  r.metrics.push_back(Metric::below("pflow_loss", pflow_err, tol.gradient_rel, pflow_n));
  r.metrics.push_back(Metric::below("sflow_loss_net", sflow_err, tol.gradient_rel, sflow_n));
  r.metrics.push_back(Metric::below("sflow_loss_adapter", adapter_err, tol.gradient_rel, adapter_n));
  return r;
}

std::vector<EvalReport> run_verification(const Tolerances& tol, std::uint64_t seed, int jump_draws,
                                         const std::vector<int>& order_steps, int gradient_cases) {
  std::vector<EvalReport> out;
  out.push_back(verify_closed_forms());
  {
    const auto schedule = PyramidSchedule::build(3, 16, {10, 10, 10}, 1.0 / 3.0);
    Rng rng = Rng::derive(seed, {0x1ee});
    out.push_back(jump_continuity_report(rng.normal_matrix(16, 4), schedule, jump_draws, seed, tol));
  }
  out.push_back(verify_single_stage(20, seed));
  out.push_back(solver_order_report(order_steps, tol));
  out.push_back(verify_resampling(seed));
  out.push_back(verify_gradients(gradient_cases, seed, tol));
  return out;
}

}  // namespace umf
