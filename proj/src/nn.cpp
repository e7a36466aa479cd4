#include "umf/nn.hpp"

#include "umf/errors.hpp"

#include <cmath>
#include <cstring>

namespace umf::nn {

int ParamStore::add(std::string name, Mat init) {
  UMF_REQUIRE(!contains(name), "duplicate parameter name: " + name);
  names_.push_back(std::move(name));
  grads_.push_back(Mat::Zero(init.rows(), init.cols()));
  values_.push_back(std::move(init));
  return static_cast<int>(values_.size()) - 1;
}

bool ParamStore::contains(const std::string& name) const {
  for (const auto& n : names_)
    if (n == name) return true;
  return false;
}

int ParamStore::index(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return static_cast<int>(i);
  throw InvalidArgument("unknown parameter: " + name);
}

void ParamStore::zero_grad() {
  for (auto& g : grads_) g.setZero();
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += static_cast<std::size_t>(v.size());
  return n;
}

std::uint64_t ParamStore::checksum() const {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* data, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= p[i];
      h *= 1099511628211ULL;
    }
  };
  for (std::size_t i = 0; i < values_.size(); ++i) {
    mix(names_[i].data(), names_[i].size());
    const std::int64_t shape[2] = {values_[i].rows(), values_[i].cols()};
    mix(shape, sizeof(shape));
    mix(values_[i].data(), sizeof(double) * static_cast<std::size_t>(values_[i].size()));
  }
  return h;
}

void ParamStore::load_values_from(const ParamStore& other) {
  for (std::size_t i = 0; i < other.size(); ++i) {
    if (!contains(other.name(i))) continue;
    auto& dst = values_[index(other.name(i))];
    UMF_REQUIRE(same_shape(dst, other.value(i)), "parameter shape mismatch: " + other.name(i));
    dst = other.value(i);
  }
}

Binder::Binder(ag::Tape& tape, ParamStore& store, bool track_grads)
    : tape_(tape),
      store_(&store),
      grad_store_(track_grads ? &store : nullptr),
      bound_(store.size(), -1) {}

Binder::Binder(ag::Tape& tape, const ParamStore& store)
    : tape_(tape), store_(&store), grad_store_(nullptr), bound_(store.size(), -1) {}

ag::Var Binder::operator()(int index) {
  UMF_REQUIRE(index >= 0 && static_cast<std::size_t>(index) < store_->size(),
              "binder: parameter index out of range");
  if (bound_[index] < 0) {
    const auto v =
        tape_.param(store_->value(index), grad_store_ ? &grad_store_->grad(index) : nullptr);
    bound_[index] = v.id;
  }
  return ag::Var{&tape_, bound_[index]};
}

Mat init_matrix(Eigen::Index rows, Eigen::Index cols, Init init, Rng& rng) {
  switch (init) {
    case Init::Zero:
      return Mat::Zero(rows, cols);
    case Init::Ones:
      return Mat::Ones(rows, cols);
    case Init::Normal002: {
      Mat m = rng.normal_matrix(rows, cols);
      return 0.02 * m;
    }
    case Init::Xavier:
    default: {
      const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
      Mat m(rows, cols);
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = (2.0 * rng.uniform() - 1.0) * limit;
      return m;
    }
  }
}

Linear Linear::create(ParamStore& store, const std::string& name, int in, int out, Init init,
                      Rng& rng) {
  Linear l;
  l.weight = store.add(name + ".weight", init_matrix(in, out, init, rng));
  l.bias = store.add(name + ".bias", Mat::Zero(1, out));
  return l;
}

ag::Var Linear::operator()(Binder& b, ag::Var x) const {
  return ag::add_row(ag::matmul(x, b(weight)), b(bias));
}

LayerNorm LayerNorm::create(ParamStore& store, const std::string& name, int width) {
  LayerNorm n;
  n.gain = store.add(name + ".gain", Mat::Ones(1, width));
  n.bias = store.add(name + ".bias", Mat::Zero(1, width));
  return n;
}

ag::Var LayerNorm::operator()(Binder& b, ag::Var x) const {
  return ag::layer_norm(x, b(gain), b(bias));
}

TransformerBlock TransformerBlock::create(ParamStore& store, const std::string& name, int width,
                                          int heads, bool zero_residual, Rng& rng) {
  UMF_REQUIRE(heads >= 1 && width % heads == 0, "transformer block: width % heads != 0");
  TransformerBlock blk;
  blk.heads = heads;
  const Init out_init = zero_residual ? Init::Zero : Init::Xavier;
  blk.norm1 = LayerNorm::create(store, name + ".norm1", width);
  blk.q = Linear::create(store, name + ".attn.q", width, width, Init::Xavier, rng);
  blk.k = Linear::create(store, name + ".attn.k", width, width, Init::Xavier, rng);
  blk.v = Linear::create(store, name + ".attn.v", width, width, Init::Xavier, rng);
  blk.o = Linear::create(store, name + ".attn.o", width, width, out_init, rng);
  blk.norm2 = LayerNorm::create(store, name + ".norm2", width);
  blk.ff1 = Linear::create(store, name + ".ff1", width, 4 * width, Init::Xavier, rng);
  blk.ff2 = Linear::create(store, name + ".ff2", 4 * width, width, out_init, rng);
  return blk;
}

ag::Var TransformerBlock::operator()(Binder& b, ag::Var x,
                                     const std::vector<ag::Segment>& segments,
                                     const ag::Var* branch_bias) const {
  ag::Var in = branch_bias ? ag::add(x, *branch_bias) : x;
  ag::Var h = norm1(b, in);
  ag::Var att = ag::attention(q(b, h), k(b, h), v(b, h), segments, heads);
  x = ag::add(x, o(b, att));
  ag::Var f = ff2(b, ag::gelu(ff1(b, norm2(b, x))));
  return ag::add(x, f);
}

RowVec sinusoidal_features(double value, int width) {
  UMF_REQUIRE(width >= 2 && width % 2 == 0, "sinusoidal features: width must be even");
  const int half = width / 2;
  RowVec out(width);
  for (int i = 0; i < half; ++i) {
    // Frequencies from 1 to 1000 cycles across the unit interval.
    const double freq = std::pow(1000.0, static_cast<double>(i) / std::max(1, half - 1));
    out(i) = std::sin(freq * value);
    out(half + i) = std::cos(freq * value);
  }
  return out;
}

Mat positional_encoding(int n, int width) {
  Mat pe(n, width);
  for (int i = 0; i < n; ++i)
    pe.row(i) = sinusoidal_features(static_cast<double>(i) / n, width);
  return pe;
}

}  // namespace umf::nn
