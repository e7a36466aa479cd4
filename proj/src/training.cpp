#include "umf/training.hpp"

#include "umf/checkpoint.hpp"
#include "umf/errors.hpp"
#include "umf/flow_paths.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <numbers>

namespace umf {

using nlohmann::json;

namespace {

constexpr char kStateMagic[4] = {'U', 'M', 'F', 'R'};
constexpr std::uint32_t kStateVersion = 1;

enum StageTag : std::uint64_t { kVaeTag = 1, kPFlowTag = 2, kSFlowTag = 3, kInitTag = 0xfeed };

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct Loop {
  std::string stage;
  std::uint64_t tag = 0;
  std::vector<nn::ParamStore*> stores;
  std::vector<std::string> columns;
  // Builds the loss on a fresh tape, runs backward into the stores' grads and
  // returns the logged components.
  std::function<std::vector<double>(int step, Rng& rng)> step;
  std::function<void()> write_checkpoint;
};

void save_state(const std::filesystem::path& path, const Loop& loop, const TrainConfig& tc,
                int next_step, const AdamW& opt, const TrainLog& log) {
  io::ByteWriter w;
  w.bytes(kStateMagic, 4);
  w.u32(kStateVersion);
  w.str(loop.stage);
  w.u64(tc.seed);
  w.u32(static_cast<std::uint32_t>(tc.steps));
  w.u32(static_cast<std::uint32_t>(next_step));
  w.u32(log.completed ? 1 : 0);
  opt.save(w);
  w.u32(static_cast<std::uint32_t>(loop.stores.size()));
  for (const auto* s : loop.stores) {
    w.u32(static_cast<std::uint32_t>(s->size()));
    for (std::size_t i = 0; i < s->size(); ++i) {
      const Mat& v = s->value(i);
      w.str(s->name(i));
      w.u32(static_cast<std::uint32_t>(v.rows()));
      w.u32(static_cast<std::uint32_t>(v.cols()));
      for (Eigen::Index k = 0; k < v.size(); ++k) w.f64(v.data()[k]);
    }
  }
  w.u32(static_cast<std::uint32_t>(log.steps.size()));
  for (std::size_t i = 0; i < log.steps.size(); ++i) {
    w.u32(static_cast<std::uint32_t>(log.steps[i]));
    w.f64(log.lrs[i]);
    w.u32(static_cast<std::uint32_t>(log.values[i].size()));
    for (double v : log.values[i]) w.f64(v);
  }
  io::write_file_atomic(path, w.buffer());
}

// Returns the next step to run.
int load_state(const std::filesystem::path& path, const Loop& loop, const TrainConfig& tc,
               AdamW& opt, TrainLog& log) {
  io::ByteReader r(io::read_file(path));
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kStateMagic, 4) != 0)
    throw FormatError(FormatErrorKind::BadMagic, "resume state: bad magic");
  if (r.u32() != kStateVersion)
    throw FormatError(FormatErrorKind::VersionMismatch, "resume state: unsupported version");
  const std::string stage = r.str();
  UMF_REQUIRE(stage == loop.stage,
              "resume state belongs to stage '" + stage + "', not '" + loop.stage + "'");
  const auto seed = r.u64();
  const auto steps = r.u32();
  UMF_REQUIRE(seed == tc.seed && static_cast<int>(steps) == tc.steps,
              "resume state was written with a different seed or step count");
  const int next = static_cast<int>(r.u32());
  log.completed = r.u32() != 0;
  opt.load(r);
  const auto n_stores = r.u32();
  UMF_REQUIRE(n_stores == loop.stores.size(), "resume state: parameter store count mismatch");
  for (auto* s : loop.stores) {
    const auto n = r.u32();
    UMF_REQUIRE(n == s->size(), "resume state: parameter count mismatch");
    for (std::size_t i = 0; i < s->size(); ++i) {
      const std::string name = r.str();
      const auto rows = r.u32(), cols = r.u32();
      Mat& v = s->value(i);
      UMF_REQUIRE(name == s->name(i) && rows == v.rows() && cols == v.cols(),
                  "resume state: parameter mismatch at " + name);
      for (Eigen::Index k = 0; k < v.size(); ++k) v.data()[k] = r.f64();
    }
  }
  const auto rows = r.u32();
  log.steps.clear();
  log.lrs.clear();
  log.values.clear();
  for (std::uint32_t i = 0; i < rows; ++i) {
    log.steps.push_back(static_cast<int>(r.u32()));
    log.lrs.push_back(r.f64());
    std::vector<double> vals(r.u32());
    for (auto& v : vals) v = r.f64();
    log.values.push_back(std::move(vals));
  }
  if (!r.at_end()) throw FormatError(FormatErrorKind::Malformed, "resume state: trailing bytes");
  log.skipped = opt.skipped();
  return next;
}

void run_loop(const Loop& loop, const TrainConfig& tc, const TrainOutputs& out, TrainLog* log_out) {
  tc.validate();
  AdamWConfig ac;
  ac.lr = tc.lr;
  ac.weight_decay = tc.weight_decay;
  ac.total_steps = tc.steps;
  AdamW opt(loop.stores, ac);
  TrainLog log;
  log.columns = loop.columns;

  int step = 0;
  if (!out.state.empty() && std::filesystem::exists(out.state))
    step = load_state(out.state, loop, tc, opt, log);

  const int stop = tc.stop_after >= 0 ? std::min(tc.stop_after, tc.steps) : tc.steps;
  for (; step < stop; ++step) {
    for (auto* s : loop.stores) s->zero_grad();
    Rng rng = Rng::derive(tc.seed, {loop.tag, static_cast<std::uint64_t>(step)});
    std::vector<double> values = loop.step(step, rng);
    log.steps.push_back(step);
    log.lrs.push_back(opt.lr_at(step));
    log.values.push_back(std::move(values));
    opt.step(step);
    log.skipped = opt.skipped();
    if (tc.state_every > 0 && (step + 1) % tc.state_every == 0 && step + 1 < stop &&
        !out.state.empty())
      save_state(out.state, loop, tc, step + 1, opt, log);
  }
  log.completed = step >= tc.steps;
  if (!out.state.empty()) save_state(out.state, loop, tc, step, opt, log);
  if (!out.loss_csv.empty()) io::write_text_atomic(out.loss_csv, log.csv());
  if (log.completed && !out.checkpoint.empty()) loop.write_checkpoint();
  if (log_out) *log_out = std::move(log);
}

std::uint64_t init_seed(std::uint64_t seed, std::uint64_t tag) {
  return Rng::derive(seed, {tag, kInitTag}).next_u64();
}

Mat stack_rows(const std::vector<Mat>& parts) {
  Eigen::Index rows = 0;
  for (const auto& p : parts) rows += p.rows();
  Mat out(rows, parts.empty() ? 0 : parts.front().cols());
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    out.middleRows(off, p.rows()) = p;
    off += p.rows();
  }
  return out;
}

}  // namespace

std::string to_string(StageSampling s) {
  return s == StageSampling::UniformStage ? "uniform_stage" : "uniform_time";
}

StageSampling stage_sampling_from_string(const std::string& s) {
  if (s == "uniform_stage") return StageSampling::UniformStage;
  if (s == "uniform_time") return StageSampling::UniformTime;
  throw InvalidArgument("unknown stage sampling mode '" + s +
                        "' (expected uniform_stage or uniform_time)");
}

AdamW::AdamW(std::vector<nn::ParamStore*> stores, AdamWConfig config)
    : stores_(std::move(stores)), config_(config) {
  UMF_REQUIRE(config_.lr > 0.0, "adamw: lr must be positive");
  UMF_REQUIRE(config_.weight_decay >= 0.0, "adamw: weight decay must be >= 0");
  UMF_REQUIRE(config_.total_steps >= 1, "adamw: total_steps must be >= 1");
  for (const auto* s : stores_) {
    std::vector<Mat> m, v;
    for (std::size_t i = 0; i < s->size(); ++i) {
      m.push_back(Mat::Zero(s->value(i).rows(), s->value(i).cols()));
      v.push_back(Mat::Zero(s->value(i).rows(), s->value(i).cols()));
    }
    m_.push_back(std::move(m));
    v_.push_back(std::move(v));
  }
}

double AdamW::lr_at(int step) const {
  const double frac = static_cast<double>(step) / config_.total_steps;
  return config_.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

bool AdamW::step(int step_index) {
  for (const auto* s : stores_)
    for (std::size_t i = 0; i < s->size(); ++i)
      if (!s->grad(i).allFinite()) {
        ++skipped_;
        return false;
      }
  ++updates_;
  const double lr = lr_at(step_index);
  const double bc1 = 1.0 - std::pow(config_.beta1, updates_);
  const double bc2 = 1.0 - std::pow(config_.beta2, updates_);
  for (std::size_t si = 0; si < stores_.size(); ++si) {
    auto* s = stores_[si];
    for (std::size_t i = 0; i < s->size(); ++i) {
      Mat& w = s->value(i);
      const Mat& g = s->grad(i);
      Mat& m = m_[si][i];
      Mat& v = v_[si][i];
      m = config_.beta1 * m + (1.0 - config_.beta1) * g;
      v = config_.beta2 * v + (1.0 - config_.beta2) * g.cwiseProduct(g);
      if (config_.weight_decay > 0.0) w *= 1.0 - lr * config_.weight_decay;
      w.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + config_.eps);
    }
  }
  return true;
}

void AdamW::save(io::ByteWriter& w) const {
  w.u32(static_cast<std::uint32_t>(updates_));
  w.u32(static_cast<std::uint32_t>(skipped_));
  for (std::size_t si = 0; si < m_.size(); ++si)
    for (std::size_t i = 0; i < m_[si].size(); ++i) {
      for (Eigen::Index k = 0; k < m_[si][i].size(); ++k) w.f64(m_[si][i].data()[k]);
      for (Eigen::Index k = 0; k < v_[si][i].size(); ++k) w.f64(v_[si][i].data()[k]);
    }
}

void AdamW::load(io::ByteReader& r) {
  updates_ = static_cast<int>(r.u32());
  skipped_ = static_cast<int>(r.u32());
  for (std::size_t si = 0; si < m_.size(); ++si)
    for (std::size_t i = 0; i < m_[si].size(); ++i) {
      for (Eigen::Index k = 0; k < m_[si][i].size(); ++k) m_[si][i].data()[k] = r.f64();
      for (Eigen::Index k = 0; k < v_[si][i].size(); ++k) v_[si][i].data()[k] = r.f64();
    }
}

FlowBatch make_pflow_batch(const std::vector<Mat>& z1, const std::vector<int>& labels,
                           const PyramidSchedule& schedule, Rng& rng, StageSampling mode) {
  UMF_REQUIRE(!z1.empty(), "pflow batch: empty batch");
  UMF_REQUIRE(labels.size() == z1.size(), "pflow batch: labels must match latents");
  const int K = schedule.stages();
  FlowBatch batch;
  for (std::size_t i = 0; i < z1.size(); ++i) {
    UMF_REQUIRE(z1[i].rows() == schedule.base_length(),
                "pflow batch: latent token count does not match the schedule base length");
    int k = 0;
    double t = 0.0;
    if (mode == StageSampling::UniformStage) {
      k = 1 + rng.uniform_int(K);
      const auto& w = schedule.window(k);
      t = w.start + rng.uniform() * (w.end - w.start);
    } else {
      t = rng.uniform();
      std::vector<int> candidates;
      for (int s = 1; s <= K; ++s)
        if (schedule.window(s).start <= t && t <= schedule.window(s).end) candidates.push_back(s);
      k = candidates[rng.uniform_int(static_cast<int>(candidates.size()))];
    }
    const Mat eps = rng.normal_matrix(schedule.length(k), z1[i].cols());
    auto sample = pyramid_point_and_target(z1[i], eps, k, t, schedule);
    batch.points.push_back(std::move(sample.point));
    batch.targets.push_back(std::move(sample.target));
    batch.times.push_back(t);
    batch.labels.push_back(labels[i]);
    batch.stages.push_back(k);
  }
  return batch;
}

ag::Var flow_regression_loss(nn::Binder& b, const VelocityNet& net, const FlowBatch& batch) {
  UMF_REQUIRE(!batch.points.empty(), "flow loss: empty batch");
  auto& tape = b.tape();
  std::vector<int> lengths;
  for (const auto& p : batch.points) lengths.push_back(static_cast<int>(p.rows()));
  const Mat x = stack_rows(batch.points);
  const Mat target = stack_rows(batch.targets);
  Mat weight(x.rows(), x.cols());
  const double n = static_cast<double>(lengths.size());
  for (std::size_t i = 0, off = 0; i < lengths.size(); off += lengths[i], ++i)
    weight.middleRows(static_cast<Eigen::Index>(off), lengths[i])
        .setConstant(1.0 / (n * lengths[i] * static_cast<double>(x.cols())));
  const ag::Var v = net.forward(b, tape.constant(x), lengths, batch.times, batch.labels);
  const ag::Var diff = ag::sub(v, tape.constant(target));
  return ag::sum(ag::mul(ag::mul(diff, diff), tape.constant(std::move(weight))));
}

ag::Var pflow_loss(nn::Binder& b, const VelocityNet& net, const std::vector<Mat>& z1,
                   const std::vector<int>& labels, const PyramidSchedule& schedule, Rng& rng,
                   StageSampling mode) {
  return flow_regression_loss(b, net, make_pflow_batch(z1, labels, schedule, rng, mode));
}

SFlowLoss sflow_loss(nn::Binder& b, const VelocityNet& net, ag::Var context,
                     const std::vector<Mat>& reactions, const std::vector<int>& labels, Rng& rng,
                     double lambda_recon) {
  UMF_REQUIRE(!reactions.empty(), "sflow loss: empty batch");
  UMF_REQUIRE(labels.size() == reactions.size(), "sflow loss: labels must match the batch");
  UMF_REQUIRE(lambda_recon >= 0.0, "sflow loss: lambda_recon must be >= 0");
  auto& tape = b.tape();
  const auto p = reactions.front().rows();
  const auto r = reactions.front().cols();
  for (const auto& w : reactions)
    UMF_REQUIRE(w.rows() == p && w.cols() == r, "sflow loss: reaction shape mismatch");
  const Eigen::Index n = static_cast<Eigen::Index>(reactions.size());
  UMF_REQUIRE(context.rows() == n * p && context.cols() == r,
              "sflow loss: context and reaction shapes differ");

  std::vector<double> t_trans(n), t_recon(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    t_trans[i] = rng.uniform();
    t_recon[i] = rng.uniform();
  }
  const Mat eps = rng.normal_matrix(n * p, r);
  Mat T1(n * p, r), T2(n * p, r);
  for (Eigen::Index i = 0; i < n; ++i) {
    T1.middleRows(i * p, p).setConstant(t_trans[i]);
    T2.middleRows(i * p, p).setConstant(t_recon[i]);
  }

  const ag::Var W = tape.constant(stack_rows(reactions));
  const ag::Var E = tape.constant(eps);
  // Reaction path C -> W and context path eps -> C.
  const ag::Var target_trans = ag::sub(W, context);
  const ag::Var x_trans = ag::add(context, ag::mul(tape.constant(std::move(T1)), target_trans));
  const ag::Var target_recon = ag::sub(context, E);
  const ag::Var x_recon = ag::add(E, ag::mul(tape.constant(std::move(T2)), target_recon));

  std::vector<int> lengths(2 * n, static_cast<int>(p));
  std::vector<double> times = t_trans;
  times.insert(times.end(), t_recon.begin(), t_recon.end());
  std::vector<int> labels2 = labels;
  labels2.insert(labels2.end(), labels.begin(), labels.end());
  const ag::Var v = net.forward(b, ag::concat_rows({x_trans, x_recon}), lengths, times, labels2);
  const ag::Var diff = ag::sub(v, ag::concat_rows({target_trans, target_recon}));
  std::vector<int> first(n * p), second(n * p);
  for (Eigen::Index i = 0; i < n * p; ++i) {
    first[i] = static_cast<int>(i);
    second[i] = static_cast<int>(n * p + i);
  }
  const ag::Var trans = ag::mean_square(ag::gather_rows(diff, std::move(first)));
  const ag::Var recon = ag::mean_square(ag::gather_rows(diff, std::move(second)));
  return {ag::add(trans, ag::scale(recon, lambda_recon)), trans, recon};
}

void TrainConfig::validate() const {
  UMF_REQUIRE(lr > 0.0, "train: lr must be positive");
  UMF_REQUIRE(weight_decay >= 0.0, "train: weight_decay must be >= 0");
  UMF_REQUIRE(steps >= 1, "train: steps must be >= 1");
  UMF_REQUIRE(batch_size >= 1, "train: batch_size must be >= 1");
  UMF_REQUIRE(lambda_recon >= 0.0, "train: lambda_recon must be >= 0");
  UMF_REQUIRE(lambda_kl >= 0.0, "train: lambda_kl must be >= 0");
  UMF_REQUIRE(state_every >= 0, "train: state_every must be >= 0");
}

std::string TrainLog::csv() const {
  std::string out = "step,lr";
  for (const auto& c : columns) out += "," + c;
  out += "\n";
  for (std::size_t i = 0; i < steps.size(); ++i) {
    out += std::to_string(steps[i]) + "," + format_double(lrs[i]);
    for (double v : values[i]) out += "," + format_double(v);
    out += "\n";
  }
  return out;
}

void fit_latent_stats(MotionVae& vae, const Dataset& data) {
  const int w = vae.config().latent_width();
  RowVec sum = RowVec::Zero(w), sq = RowVec::Zero(w);
  double count = 0;
  std::vector<Mat> chunk;
  auto flush = [&]() {
    if (chunk.empty()) return;
    for (const auto& [mu, lv] : vae.encode_batch(chunk)) {
      sum += mu.colwise().sum();
      sq += mu.array().square().matrix().colwise().sum();
      count += static_cast<double>(mu.rows());
    }
    chunk.clear();
  };
  for (const auto& s : data.scenes)
    for (const auto& a : s.agents) {
      chunk.push_back(a);
      if (chunk.size() == 256) flush();
    }
  flush();
  UMF_REQUIRE(count > 0, "latent statistics need at least one motion");
  const RowVec mean = sum / count;
  RowVec std(w);
  for (int c = 0; c < w; ++c)
    std(c) = std::sqrt(std::max(sq(c) / count - mean(c) * mean(c), 1e-12));
  vae.set_latent_stats(mean, std);
}

LatentScenes encode_latents(const MotionVae& vae, const Dataset& data) {
  LatentScenes out;
  std::vector<Mat> chunk;
  std::vector<std::pair<std::size_t, std::size_t>> where;
  out.latents.resize(data.scenes.size());
  auto flush = [&]() {
    if (chunk.empty()) return;
    const auto enc = vae.encode_batch(chunk);
    for (std::size_t i = 0; i < enc.size(); ++i)
      out.latents[where[i].first][where[i].second] = vae.to_flow_latent(enc[i].first);
    chunk.clear();
    where.clear();
  };
  for (std::size_t s = 0; s < data.scenes.size(); ++s) {
    out.labels.push_back(data.scenes[s].label);
    out.latents[s].resize(data.scenes[s].agents.size());
    for (std::size_t a = 0; a < data.scenes[s].agents.size(); ++a) {
      chunk.push_back(data.scenes[s].agents[a]);
      where.emplace_back(s, a);
      if (chunk.size() == 256) flush();
    }
  }
  flush();
  return out;
}

MotionVae train_vae(const Dataset& train, const MotionVaeConfig& config, const TrainConfig& tc,
                    const TrainOutputs& out, TrainLog* log) {
  UMF_REQUIRE(!train.scenes.empty(), "train vae: empty dataset");
  MotionVae vae = MotionVae::create(config, init_seed(tc.seed, kVaeTag));
  vae.set_data_stats(train.mean, train.std);
  std::vector<const Mat*> pool;
  for (const auto& s : train.scenes)
    for (const auto& a : s.agents) pool.push_back(&a);

  Loop loop;
  loop.stage = "vae";
  loop.tag = kVaeTag;
  loop.stores = {&vae.params()};
  loop.columns = {"total", "recon", "kl", "geometric"};
  loop.step = [&](int, Rng& rng) {
    std::vector<Mat> batch;
    for (int i = 0; i < tc.batch_size; ++i)
      batch.push_back(*pool[rng.uniform_int(static_cast<int>(pool.size()))]);
    ag::Tape tape;
    nn::Binder b(tape, vae.params(), true);
    const auto loss = vae_loss(b, vae, batch, rng, tc.lambda_kl);
    tape.backward(loss.total);
    const auto v = loss.values();
    return std::vector<double>{v.total, v.recon, v.kl, v.geometric};
  };
  loop.write_checkpoint = [&]() {
    fit_latent_stats(vae, train);
    Checkpoint ck;
    ck.sections.push_back(vae.to_section());
    ck.save(out.checkpoint);
  };
  TrainLog local;
  run_loop(loop, tc, out, &local);
  // Latent statistics are part of the trained model even without a checkpoint path.
  if (local.completed && out.checkpoint.empty()) fit_latent_stats(vae, train);
  if (log) *log = std::move(local);
  return vae;
}

CheckpointSection pflow_section(const VelocityNet& net, const PyramidSchedule& schedule) {
  const json meta{{"config", json::parse(net.config().to_json())},
                  {"schedule", json::parse(schedule.to_json())}};
  return section_from_params("pflow", meta.dump(), net.params());
}

VelocityNet pflow_from_checkpoint(const Checkpoint& ck, PyramidSchedule* schedule) {
  const auto& sec = ck.section("pflow");
  const auto meta = json::parse(sec.meta);
  VelocityNet net = VelocityNet::create(VelocityNetConfig::from_json(meta.at("config").dump()), 0);
  params_from_section(sec, net.params());
  if (schedule) *schedule = PyramidSchedule::from_json(meta.at("schedule").dump());
  return net;
}

VelocityNet train_pflow(const LatentScenes& data, const VelocityNetConfig& config,
                        const PyramidSchedule& schedule, const TrainConfig& tc,
                        const TrainOutputs& out, TrainLog* log) {
  UMF_REQUIRE(!data.latents.empty(), "train pflow: empty dataset");
  UMF_REQUIRE(data.latents.front().front().cols() == config.token_dim,
              "train pflow: latent width does not match the velocity net");
  VelocityNet net = VelocityNet::create(config, init_seed(tc.seed, kPFlowTag));
  Loop loop;
  loop.stage = "pflow";
  loop.tag = kPFlowTag;
  loop.stores = {&net.params()};
  loop.columns = {"loss"};
  loop.step = [&](int, Rng& rng) {
    std::vector<Mat> z1;
    std::vector<int> labels;
    for (int i = 0; i < tc.batch_size; ++i) {
      const int s = rng.uniform_int(static_cast<int>(data.latents.size()));
      z1.push_back(data.latents[s].front());
      labels.push_back(data.labels[s]);
    }
    ag::Tape tape;
    nn::Binder b(tape, net.params(), true);
    const ag::Var loss = pflow_loss(b, net, z1, labels, schedule, rng, tc.stage_sampling);
    tape.backward(loss);
    return std::vector<double>{ag::scalar(loss)};
  };
  loop.write_checkpoint = [&]() {
    Checkpoint ck;
    ck.sections.push_back(pflow_section(net, schedule));
    ck.save(out.checkpoint);
  };
  run_loop(loop, tc, out, log);
  return net;
}

Checkpoint sflow_checkpoint(const SFlowModel& model) {
  Checkpoint ck;
  const json meta{{"config", json::parse(model.net.config().to_json())},
                  {"lambda_recon", model.lambda_recon}};
  ck.sections.push_back(section_from_params("sflow", meta.dump(), model.net.params()));
  const json ameta{{"config", json::parse(model.adapter.config().to_json())}};
  ck.sections.push_back(
      section_from_params("context_adapter", ameta.dump(), model.adapter.params()));
  return ck;
}

SFlowModel sflow_from_checkpoint(const Checkpoint& ck) {
  const auto& sec = ck.section("sflow");
  const auto meta = json::parse(sec.meta);
  const auto& asec = ck.section("context_adapter");
  const auto ameta = json::parse(asec.meta);
  SFlowModel m{VelocityNet::create(VelocityNetConfig::from_json(meta.at("config").dump()), 0),
               ContextAdapter::create(ContextAdapterConfig::from_json(ameta.at("config").dump()), 0),
               meta.at("lambda_recon").get<double>()};
  params_from_section(sec, m.net.params());
  params_from_section(asec, m.adapter.params());
  return m;
}

SFlowModel train_sflow(const LatentScenes& data, const VelocityNetConfig& config,
                       const ContextAdapterConfig& adapter_config, const TrainConfig& tc,
                       const TrainOutputs& out, TrainLog* log) {
  UMF_REQUIRE(!data.latents.empty(), "train sflow: empty dataset");
  const int n_agents = static_cast<int>(data.latents.front().size());
  UMF_REQUIRE(n_agents >= 2, "train sflow: scenes need at least two agents");
  UMF_REQUIRE(adapter_config.token_dim == config.token_dim,
              "train sflow: adapter and velocity net widths differ");
  UMF_REQUIRE(n_agents - 1 <= adapter_config.max_agents,
              "train sflow: more context agents than the adapter supports");
  const std::uint64_t seed = init_seed(tc.seed, kSFlowTag);
  SFlowModel model{VelocityNet::create(config, seed),
                   ContextAdapter::create(adapter_config, splitmix64(seed)), tc.lambda_recon};
  Loop loop;
  loop.stage = "sflow";
  loop.tag = kSFlowTag;
  loop.stores = {&model.net.params(), &model.adapter.params()};
  loop.columns = {"total", "trans", "recon"};
  loop.step = [&](int, Rng& rng) {
    std::vector<std::vector<Mat>> contexts;
    std::vector<Mat> reactions;
    std::vector<int> labels;
    for (int i = 0; i < tc.batch_size; ++i) {
      const int s = rng.uniform_int(static_cast<int>(data.latents.size()));
      const int target = 1 + rng.uniform_int(n_agents - 1);
      const auto& agents = data.latents[s];
      contexts.emplace_back(agents.begin(), agents.begin() + target);
      reactions.push_back(agents[target]);
      labels.push_back(data.labels[s]);
    }
    ag::Tape tape;
    nn::Binder bn(tape, model.net.params(), true);
    nn::Binder ba(tape, model.adapter.params(), true);
    const ag::Var context = model.adapter.forward(ba, contexts);
    const auto loss = sflow_loss(bn, model.net, context, reactions, labels, rng, tc.lambda_recon);
    tape.backward(loss.total);
    return std::vector<double>{ag::scalar(loss.total), ag::scalar(loss.trans),
                               ag::scalar(loss.recon)};
  };
  loop.write_checkpoint = [&]() { sflow_checkpoint(model).save(out.checkpoint); };
  run_loop(loop, tc, out, log);
  return model;
}

}  // namespace umf
