#include "umf/sampling.hpp"

#include "umf/binary_io.hpp"
#include "umf/checkpoint.hpp"
#include "umf/errors.hpp"
#include "umf/flow_paths.hpp"

#include <json.hpp>

#include <cstring>

namespace umf {

using nlohmann::json;

Mat euler_solve(const Field& field, Mat x, double t_start, double t_end, int steps,
                std::vector<double>* times) {
  UMF_REQUIRE(steps >= 1, "euler_solve: steps must be >= 1");
  UMF_REQUIRE(t_start < t_end, "euler_solve: need t_start < t_end");
  const double dt = (t_end - t_start) / steps;
  for (int m = 0; m < steps; ++m) {
    const double t = t_start + m * dt;
    if (times) times->push_back(t);
    const Mat v = field(x, t);
    if (!v.allFinite())
      throw NumericError("euler_solve: non-finite velocity at step " + std::to_string(m));
    x += dt * v;
  }
  return x;
}

Mat sample_prior(const StageField& field, const PyramidSchedule& schedule, int width, Rng& rng,
                 PriorTrace* trace) {
  UMF_REQUIRE(width >= 1, "sample_prior: width must be >= 1");
  const int K = schedule.stages();
  Mat x = rng.normal_matrix(schedule.length(K), width);
  for (int k = K; k >= 1; --k) {
    const auto& w = schedule.window(k);
    const double span = w.end - w.start;
    if (trace) trace->stage_starts.push_back(x);
    std::vector<double> times;
    x = euler_solve([&](const Mat& z, double t) -> Mat { return field(z, t, k) / span; },
                    std::move(x), w.start, w.end, schedule.steps(k), trace ? &times : nullptr);
    if (trace) {
      trace->times.insert(trace->times.end(), times.begin(), times.end());
      trace->stages.insert(trace->stages.end(), times.size(), k);
      trace->stage_ends.push_back(x);
    }
    if (k > 1) x = jump_update(x, schedule.window(k - 1).start, w.end, rng);
  }
  return x;
}

Mat sample_prior(const VelocityNet& net, const PyramidSchedule& schedule, Condition cond, Rng& rng,
                 PriorTrace* trace) {
  return sample_prior([&](const Mat& x, double t, int) { return net(x, t, cond); }, schedule,
                      net.config().token_dim, rng, trace);
}

Mat sample_reaction(const VelocityNet& net, const Mat& context, Condition cond, int steps, Rng* rng,
                    double start_noise, std::vector<Mat>* states) {
  UMF_REQUIRE(context.cols() == net.config().token_dim,
              "sample_reaction: context width does not match the velocity net");
  UMF_REQUIRE(start_noise >= 0.0, "sample_reaction: start_noise must be >= 0");
  Mat x = context;
  if (start_noise > 0.0) {
    UMF_REQUIRE(rng != nullptr, "sample_reaction: start noise needs a random source");
    x += start_noise * rng->normal_matrix(x.rows(), x.cols());
  }
  return euler_solve(
      [&](const Mat& z, double t) -> Mat {
        if (states) states->push_back(z);
        return net(z, t, cond);
      },
      std::move(x), 0.0, 1.0, steps);
}

Mat build_context(const ContextAdapter& adapter, const std::vector<Mat>& generated) {
  UMF_REQUIRE(!generated.empty(), "build_context: no generated agents");
  return adapter(generated);
}

Pipeline load_pipeline(const std::filesystem::path& vae, const std::filesystem::path& pflow,
                       const std::filesystem::path& sflow) {
  for (const auto& p : {vae, pflow, sflow})
    if (!std::filesystem::exists(p)) throw MissingArtifact("missing checkpoint: " + p.string());
  PyramidSchedule schedule = PyramidSchedule::build(1, 1, {1}, 0.0);
  VelocityNet prior = pflow_from_checkpoint(Checkpoint::load(pflow), &schedule);
  Pipeline p{MotionVae::from_section(Checkpoint::load(vae).section("vae")), std::move(prior),
             schedule, sflow_from_checkpoint(Checkpoint::load(sflow))};
  const int r = p.vae.config().latent_width();
  UMF_REQUIRE(p.pflow.config().token_dim == r && p.sflow.net.config().token_dim == r,
              "checkpoints disagree on the latent width");
  UMF_REQUIRE(p.schedule.base_length() == p.vae.config().latent_tokens,
              "pflow schedule does not match the VAE latent length");
  return p;
}

GeneratedScene generate_scene(const Pipeline& models, int n_agents, Condition cond, Rng& rng) {
  UMF_REQUIRE(n_agents >= 1, "generate_scene: need at least one agent");
  GeneratedScene out;
  out.latents.push_back(sample_prior(models.pflow, models.schedule, cond, rng));
  ++out.audit.pflow_calls;
  for (int i = 1; i < n_agents; ++i) {
    const Mat context = build_context(models.sflow.adapter, out.latents);
    out.audit.context_sizes.push_back(static_cast<int>(out.latents.size()));
    out.latents.push_back(sample_reaction(models.sflow.net, context, cond, models.reaction_steps,
                                          &rng, models.start_noise));
    ++out.audit.sflow_calls;
  }
  std::vector<Mat> raw;
  for (const auto& z : out.latents) raw.push_back(models.vae.from_flow_latent(z));
  out.motions = models.vae.decode_batch(raw);
  return out;
}

Rng scene_rng(std::uint64_t seed, std::uint64_t index) { return Rng::derive(seed, {0x5ce4e, index}); }

std::string SampleMeta::to_json() const {
  return json{{"seed", seed},
              {"n_agents", n_agents},
              {"prior_steps", prior_steps},
              {"reaction_steps", reaction_steps},
              {"checkpoints", {{"vae", vae_hash}, {"pflow", pflow_hash}, {"sflow", sflow_hash}}}}
      .dump();
}

SampleMeta SampleMeta::from_json(const std::string& text) {
  const auto j = json::parse(text);
  SampleMeta m;
  m.seed = j.at("seed");
  m.n_agents = j.at("n_agents");
  m.prior_steps = j.at("prior_steps").get<std::vector<int>>();
  m.reaction_steps = j.at("reaction_steps");
  m.vae_hash = j.at("checkpoints").at("vae");
  m.pflow_hash = j.at("checkpoints").at("pflow");
  m.sflow_hash = j.at("checkpoints").at("sflow");
  return m;
}

namespace {
constexpr char kSampleMagic[4] = {'U', 'M', 'F', 'S'};
}

// Dataset body, then the metadata text, then its u32 length.
void save_samples(const std::filesystem::path& path, const std::vector<Scene>& scenes,
                  const SampleMeta& meta) {
  UMF_REQUIRE(!scenes.empty(), "save_samples: no scenes");
  auto bytes = encode_dataset(Dataset::from_scenes(scenes), kSampleMagic);
  const std::string text = meta.to_json();
  io::ByteWriter tail;
  tail.bytes(text.data(), text.size());
  tail.u32(static_cast<std::uint32_t>(text.size()));
  bytes.insert(bytes.end(), tail.buffer().begin(), tail.buffer().end());
  io::write_file_atomic(path, bytes);
}

std::pair<std::vector<Scene>, SampleMeta> load_samples(const std::filesystem::path& path) {
  auto bytes = io::read_file(path);
  if (bytes.size() >= 4 && std::memcmp(bytes.data(), kSampleMagic, 4) != 0)
    throw FormatError(FormatErrorKind::BadMagic, "sample file: bad magic");
  if (bytes.size() < 8) throw FormatError(FormatErrorKind::Truncated, "sample file: truncated");
  io::ByteReader len_reader({bytes.end() - 4, bytes.end()});
  const std::size_t len = len_reader.u32();
  if (len + 4 > bytes.size()) throw FormatError(FormatErrorKind::Truncated, "sample file: truncated");
  const std::string text(bytes.end() - 4 - static_cast<std::ptrdiff_t>(len), bytes.end() - 4);
  bytes.resize(bytes.size() - 4 - len);
  Dataset d = decode_dataset(std::move(bytes), kSampleMagic);
  SampleMeta meta;
  try {
    meta = SampleMeta::from_json(text);
  } catch (const json::exception& e) {
    throw FormatError(FormatErrorKind::Malformed, std::string("sample file metadata: ") + e.what());
  }
  return {std::move(d.scenes), meta};
}

}  // namespace umf
