#pragma once

#include "umf/tensor.hpp"

#include <functional>
#include <utility>
#include <vector>

// Minimal reverse-mode differentiation over row-major matrices. A Tape records
// every op in creation order; backward() walks it in reverse. Tapes are cheap
// and meant to live for one forward/backward pass.
namespace umf::ag {

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Mat& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

// Contiguous run of rows that attend to each other.
struct Segment {
  int offset = 0;
  int length = 0;
};

class Tape {
 public:
  Tape() { nodes_.reserve(1024); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Mat value);
  Var leaf(Mat value);
  // Leaf that refers to `value` without copying (it must outlive the tape); its
  // gradient is added into `*grad_sink` at the end of backward().
  Var param(const Mat& value, Mat* grad_sink);

  void backward(Var scalar_loss);

  const Mat& value(Var v) const {
    const auto& n = nodes_[v.id];
    return n.ref ? *n.ref : n.value;
  }
  // Gradient of the last backward() w.r.t. v; zeros if v did not influence the loss.
  Mat grad(Var v) const;
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  // Op construction. `back` receives the output gradient and must accumulate
  // into the parents through accumulate().
  using Backward = std::function<void(Tape&, const Mat& out_grad)>;
  Var record(Mat value, std::initializer_list<Var> parents, Backward back);
  Var record(Mat value, const std::vector<Var>& parents, Backward back);
  void accumulate(Var v, const Mat& g);
  template <typename Expr>
  void accumulate_expr(Var v, const Expr& g) {
    auto& n = nodes_[v.id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) n.grad = Mat::Zero(value(v).rows(), value(v).cols());
    n.grad += g;
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    Backward back;
    Mat* sink = nullptr;
    const Mat* ref = nullptr;
  };
  std::vector<Node> nodes_;
};

inline const Mat& Var::value() const { return tape->value(*this); }

// Elementwise and linear algebra.
Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double c);
Var add_row(Var a, Var row);  // broadcast a 1 x n row over every row of a
Var gelu(Var a);
Var exp(Var a);
Var sqrt(Var a);
Var clamp(Var a, double lo, double hi);
// a * scale_row + shift_row with constant rows (per-column affine map).
Var affine_cols(Var a, const RowVec& scale_row, const RowVec& shift_row);

// Shape manipulation.
Var reshape(Var a, Eigen::Index rows, Eigen::Index cols);
Var concat_rows(const std::vector<Var>& parts);
Var gather_rows(Var a, std::vector<int> index);

// Reductions to a 1 x 1 scalar.
Var sum(Var a);
Var mean(Var a);
Var mean_square(Var a);
Var mse(Var a, Var b);

// Row-wise layer normalization with gain and bias rows (1 x n).
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);

// Multi-head scaled dot-product self-attention. q, k, v are (rows x d) with the
// heads laid out as consecutive column groups; attention is restricted to each segment.
Var attention(Var q, Var k, Var v, std::vector<Segment> segments, int heads);

double scalar(Var v);

}  // namespace umf::ag
