#pragma once

#include "umf/autograd.hpp"
#include "umf/rng.hpp"
#include "umf/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace umf::nn {

// Named, ordered parameter list with matching gradient buffers.
class ParamStore {
 public:
  int add(std::string name, Mat init);
  int index(const std::string& name) const;  // throws if absent
  bool contains(const std::string& name) const;

  std::size_t size() const { return values_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  Mat& value(std::size_t i) { return values_[i]; }
  const Mat& value(std::size_t i) const { return values_[i]; }
  Mat& grad(std::size_t i) { return grads_[i]; }
  const Mat& grad(std::size_t i) const { return grads_[i]; }

  void zero_grad();
  std::size_t scalar_count() const;
  // FNV-1a over names, shapes, and raw doubles.
  std::uint64_t checksum() const;

  // Copies values of every parameter whose name also exists in `other` (shapes must agree).
  void load_values_from(const ParamStore& other);

 private:
  std::vector<std::string> names_;
  std::vector<Mat> values_;
  std::vector<Mat> grads_;
};

// Binds store parameters onto one tape, once each. With `track_grads` false the
// parameters enter as constants (inference).
class Binder {
 public:
  Binder(ag::Tape& tape, ParamStore& store, bool track_grads);
  Binder(ag::Tape& tape, const ParamStore& store);
  ag::Tape& tape() { return tape_; }
  ag::Var operator()(int index);

 private:
  ag::Tape& tape_;
  const ParamStore* store_;
  ParamStore* grad_store_;  // null when gradients are not tracked
  std::vector<int> bound_;
};

enum class Init { Xavier, Zero, Normal002, Ones };

Mat init_matrix(Eigen::Index rows, Eigen::Index cols, Init init, Rng& rng);

struct Linear {
  int weight = -1;
  int bias = -1;

  static Linear create(ParamStore& store, const std::string& name, int in, int out, Init init,
                       Rng& rng);
  ag::Var operator()(Binder& b, ag::Var x) const;
};

struct LayerNorm {
  int gain = -1;
  int bias = -1;

  static LayerNorm create(ParamStore& store, const std::string& name, int width);
  ag::Var operator()(Binder& b, ag::Var x) const;
};

// Pre-norm transformer block: x + Attn(LN(x)), then x + FFN(LN(x)) with a 4x GELU MLP.
// `zero_residual` zero-initializes both branch output projections so the block starts
// as the identity.
struct TransformerBlock {
  LayerNorm norm1, norm2;
  Linear q, k, v, o;
  Linear ff1, ff2;
  int heads = 1;

  static TransformerBlock create(ParamStore& store, const std::string& name, int width,
                                 int heads, bool zero_residual, Rng& rng);
  // `branch_bias` (optional, same shape as x) is added to the attention branch input only.
  ag::Var operator()(Binder& b, ag::Var x, const std::vector<ag::Segment>& segments,
                     const ag::Var* branch_bias = nullptr) const;
};

// Sinusoidal features of a scalar in [0, 1] (timestep or normalized position).
RowVec sinusoidal_features(double value, int width);

// Rows i = 0..n-1 encode the normalized position i / n.
Mat positional_encoding(int n, int width);

}  // namespace umf::nn
