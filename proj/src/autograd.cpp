#include "umf/autograd.hpp"

#include "umf/errors.hpp"

#include <cmath>
#include <memory>
#include <numbers>

namespace umf::ag {

Var Tape::constant(Mat value) {
  nodes_.push_back(Node{std::move(value), Mat(), false, nullptr, nullptr});
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::leaf(Mat value) {
  nodes_.push_back(Node{std::move(value), Mat(), true, nullptr, nullptr});
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::param(const Mat& value, Mat* grad_sink) {
  nodes_.push_back(Node{Mat(), Mat(), grad_sink != nullptr, nullptr, grad_sink, &value});
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::record(Mat value, std::initializer_list<Var> parents, Backward back) {
  bool rg = false;
  for (auto p : parents) rg = rg || nodes_[p.id].requires_grad;
  nodes_.push_back(Node{std::move(value), Mat(), rg, rg ? std::move(back) : nullptr, nullptr});
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::record(Mat value, const std::vector<Var>& parents, Backward back) {
  bool rg = false;
  for (auto p : parents) rg = rg || nodes_[p.id].requires_grad;
  nodes_.push_back(Node{std::move(value), Mat(), rg, rg ? std::move(back) : nullptr, nullptr});
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

void Tape::accumulate(Var v, const Mat& g) { accumulate_expr(v, g); }

Mat Tape::grad(Var v) const {
  const auto& n = nodes_[v.id];
  if (n.grad.size() == 0) return Mat::Zero(value(v).rows(), value(v).cols());
  return n.grad;
}

void Tape::backward(Var loss) {
  UMF_REQUIRE(loss.tape == this, "backward: variable belongs to another tape");
  UMF_REQUIRE(value(loss).size() == 1, "backward: loss must be a scalar");
  for (auto& n : nodes_) n.grad.resize(0, 0);
  nodes_[loss.id].grad = Mat::Ones(1, 1);
  for (int i = loss.id; i >= 0; --i) {
    auto& n = nodes_[i];
    if (n.grad.size() == 0) continue;
    // Closures only touch parent grads (lower ids), so n.grad stays valid.
    if (n.back) n.back(*this, n.grad);
  }
  for (auto& n : nodes_)
    if (n.sink != nullptr && n.grad.size() != 0) *n.sink += n.grad;
}

double scalar(Var v) { return v.value()(0, 0); }

namespace {

void check_same(Var a, Var b, const char* op) {
  UMF_REQUIRE(a.tape == b.tape, std::string(op) + ": operands on different tapes");
  UMF_REQUIRE(same_shape(a.value(), b.value()), std::string(op) + ": shape mismatch");
}

}  // namespace

Var matmul(Var a, Var b) {
  UMF_REQUIRE(a.cols() == b.rows(), "matmul: inner dimensions differ");
  Tape& t = *a.tape;
  Mat out = a.value() * b.value();
  return t.record(std::move(out), {a, b}, [a, b](Tape& t, const Mat& g) {
    if (t.requires_grad(a)) t.accumulate_expr(a, g * t.value(b).transpose());
    if (t.requires_grad(b)) t.accumulate_expr(b, t.value(a).transpose() * g);
  });
}

Var add(Var a, Var b) {
  check_same(a, b, "add");
  return a.tape->record(a.value() + b.value(), {a, b}, [a, b](Tape& t, const Mat& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var sub(Var a, Var b) {
  check_same(a, b, "sub");
  return a.tape->record(a.value() - b.value(), {a, b}, [a, b](Tape& t, const Mat& g) {
    t.accumulate(a, g);
    t.accumulate_expr(b, -g);
  });
}

Var mul(Var a, Var b) {
  check_same(a, b, "mul");
  Mat out = a.value().cwiseProduct(b.value());
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Mat& g) {
    if (t.requires_grad(a)) t.accumulate_expr(a, g.cwiseProduct(t.value(b)));
    if (t.requires_grad(b)) t.accumulate_expr(b, g.cwiseProduct(t.value(a)));
  });
}

Var scale(Var a, double c) {
  return a.tape->record(c * a.value(), {a},
                        [a, c](Tape& t, const Mat& g) { t.accumulate_expr(a, c * g); });
}

Var add_row(Var a, Var row) {
  UMF_REQUIRE(row.rows() == 1 && row.cols() == a.cols(), "add_row: row must be 1 x cols");
  Mat out = a.value().rowwise() + row.value().row(0);
  return a.tape->record(std::move(out), {a, row}, [a, row](Tape& t, const Mat& g) {
    t.accumulate(a, g);
    if (t.requires_grad(row)) t.accumulate_expr(row, g.colwise().sum());
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Var gelu(Var a) {
  const auto x = a.value().array();
  // tanh through exp, which Eigen vectorizes for doubles
  const Eigen::ArrayXXd u = kGeluC * (x + kGeluA * x.cube());
  auto th = std::make_shared<Eigen::ArrayXXd>(1.0 - 2.0 / ((2.0 * u).exp() + 1.0));
  Mat out = (0.5 * x * (1.0 + *th)).matrix();
  return a.tape->record(std::move(out), {a}, [a, th](Tape& t, const Mat& g) {
    const auto v = t.value(a).array();
    const auto du = kGeluC * (1.0 + 3.0 * kGeluA * v.square());
    t.accumulate_expr(
        a, (g.array() * (0.5 * (1.0 + *th) + 0.5 * v * (1.0 - th->square()) * du)).matrix());
  });
}

Var exp(Var a) {
  Mat out = a.value().array().exp().matrix();
  const int id = static_cast<int>(a.tape->size());
  return a.tape->record(std::move(out), {a}, [a, id](Tape& t, const Mat& g) {
    t.accumulate_expr(a, g.cwiseProduct(t.value(Var{&t, id})));
  });
}

Var sqrt(Var a) {
  Mat out = a.value().array().sqrt().matrix();
  const int id = static_cast<int>(a.tape->size());
  return a.tape->record(std::move(out), {a}, [a, id](Tape& t, const Mat& g) {
    t.accumulate_expr(a, (0.5 * g.array() / t.value(Var{&t, id}).array()).matrix());
  });
}

Var clamp(Var a, double lo, double hi) {
  Mat out = a.value().cwiseMax(lo).cwiseMin(hi);
  return a.tape->record(std::move(out), {a}, [a, lo, hi](Tape& t, const Mat& g) {
    const Mat& x = t.value(a);
    Mat d = g;
    for (Eigen::Index i = 0; i < x.size(); ++i)
      if (x.data()[i] < lo || x.data()[i] > hi) d.data()[i] = 0.0;
    t.accumulate(a, d);
  });
}

Var affine_cols(Var a, const RowVec& scale_row, const RowVec& shift_row) {
  UMF_REQUIRE(scale_row.size() == a.cols() && shift_row.size() == a.cols(),
              "affine_cols: row sizes must match column count");
  Mat out = (a.value().array().rowwise() * scale_row.array()).matrix();
  out.rowwise() += shift_row;
  return a.tape->record(std::move(out), {a}, [a, scale_row](Tape& t, const Mat& g) {
    t.accumulate_expr(a, (g.array().rowwise() * scale_row.array()).matrix());
  });
}

Var reshape(Var a, Eigen::Index rows, Eigen::Index cols) {
  UMF_REQUIRE(rows * cols == a.value().size(), "reshape: element count changes");
  Mat out = Eigen::Map<const Mat>(a.value().data(), rows, cols);
  const Eigen::Index r0 = a.rows(), c0 = a.cols();
  return a.tape->record(std::move(out), {a}, [a, r0, c0](Tape& t, const Mat& g) {
    t.accumulate_expr(a, Eigen::Map<const Mat>(g.data(), r0, c0));
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  UMF_REQUIRE(!parts.empty(), "concat_rows: no inputs");
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  for (auto p : parts) {
    UMF_REQUIRE(p.cols() == cols, "concat_rows: column mismatch");
    rows += p.rows();
  }
  Mat out(rows, cols);
  Eigen::Index r = 0;
  for (auto p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return parts.front().tape->record(std::move(out), parts, [parts](Tape& t, const Mat& g) {
    Eigen::Index r = 0;
    for (auto p : parts) {
      const Eigen::Index n = t.value(p).rows();
      if (t.requires_grad(p)) t.accumulate_expr(p, g.middleRows(r, n));
      r += n;
    }
  });
}

Var gather_rows(Var a, std::vector<int> index) {
  Mat out(static_cast<Eigen::Index>(index.size()), a.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    UMF_REQUIRE(index[i] >= 0 && index[i] < a.rows(), "gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = a.value().row(index[i]);
  }
  return a.tape->record(std::move(out), {a},
                        [a, index = std::move(index)](Tape& t, const Mat& g) {
                          Mat d = Mat::Zero(t.value(a).rows(), t.value(a).cols());
                          for (std::size_t i = 0; i < index.size(); ++i)
                            d.row(index[i]) += g.row(static_cast<Eigen::Index>(i));
                          t.accumulate(a, d);
                        });
}

Var sum(Var a) {
  Mat out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape->record(std::move(out), {a}, [a](Tape& t, const Mat& g) {
    t.accumulate_expr(a, Mat::Constant(t.value(a).rows(), t.value(a).cols(), g(0, 0)));
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

Var mean_square(Var a) {
  const double n = static_cast<double>(a.value().size());
  Mat out(1, 1);
  out(0, 0) = a.value().squaredNorm() / n;
  return a.tape->record(std::move(out), {a}, [a, n](Tape& t, const Mat& g) {
    t.accumulate_expr(a, (2.0 * g(0, 0) / n) * t.value(a));
  });
}

Var mse(Var a, Var b) { return mean_square(sub(a, b)); }

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const Mat& xv = x.value();
  const Eigen::Index n = xv.cols();
  UMF_REQUIRE(gain.rows() == 1 && gain.cols() == n && bias.rows() == 1 && bias.cols() == n,
              "layer_norm: gain/bias must be 1 x cols");
  Mat xhat(xv.rows(), n);
  Vec inv_std(xv.rows());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const double mu = xv.row(r).mean();
    const double var = (xv.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mu) * inv_std(r);
  }
  Mat out = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
  out.rowwise() += bias.value().row(0);
  return x.tape->record(
      std::move(out), {x, gain, bias},
      [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t,
                                                                           const Mat& g) {
        if (t.requires_grad(gain)) t.accumulate_expr(gain, g.cwiseProduct(xhat).colwise().sum());
        if (t.requires_grad(bias)) t.accumulate_expr(bias, g.colwise().sum());
        if (!t.requires_grad(x)) return;
        const Mat dxhat = (g.array().rowwise() * t.value(gain).row(0).array()).matrix();
        const double n = static_cast<double>(xhat.cols());
        Mat dx(xhat.rows(), xhat.cols());
        for (Eigen::Index r = 0; r < xhat.rows(); ++r) {
          const double m1 = dxhat.row(r).sum() / n;
          const double m2 = dxhat.row(r).dot(xhat.row(r)) / n;
          dx.row(r) = inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
        }
        t.accumulate(x, dx);
      });
}

Var attention(Var q, Var k, Var v, std::vector<Segment> segments, int heads) {
  check_same(q, k, "attention");
  check_same(q, v, "attention");
  const Eigen::Index d = q.cols();
  UMF_REQUIRE(heads >= 1 && d % heads == 0, "attention: width not divisible by heads");
  const Eigen::Index dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const Mat& Q = q.value();
  const Mat& K = k.value();
  const Mat& V = v.value();
  Mat out = Mat::Zero(Q.rows(), d);
  // probs[s * heads + h] is the softmax matrix of segment s, head h.
  std::vector<Mat> probs;
  probs.reserve(segments.size() * heads);
  for (const auto& seg : segments) {
    UMF_REQUIRE(seg.offset >= 0 && seg.length >= 1 && seg.offset + seg.length <= Q.rows(),
                "attention: segment out of range");
    for (int h = 0; h < heads; ++h) {
      const auto qs = Q.block(seg.offset, h * dh, seg.length, dh);
      const auto ks = K.block(seg.offset, h * dh, seg.length, dh);
      const auto vs = V.block(seg.offset, h * dh, seg.length, dh);
      Mat s = (qs * ks.transpose()) * inv_sqrt;
      for (Eigen::Index r = 0; r < s.rows(); ++r) {
        const double mx = s.row(r).maxCoeff();
        s.row(r) = (s.row(r).array() - mx).exp();
        s.row(r) /= s.row(r).sum();
      }
      out.block(seg.offset, h * dh, seg.length, dh).noalias() = s * vs;
      probs.push_back(std::move(s));
    }
  }
  return q.tape->record(
      std::move(out), {q, k, v},
      [q, k, v, segments = std::move(segments), heads, dh, inv_sqrt,
       probs = std::move(probs)](Tape& t, const Mat& g) {
        const Mat& Q = t.value(q);
        const Mat& K = t.value(k);
        const Mat& V = t.value(v);
        Mat dQ = Mat::Zero(Q.rows(), Q.cols());
        Mat dK = Mat::Zero(Q.rows(), Q.cols());
        Mat dV = Mat::Zero(Q.rows(), Q.cols());
        std::size_t idx = 0;
        for (const auto& seg : segments) {
          for (int h = 0; h < heads; ++h, ++idx) {
            const Mat& P = probs[idx];
            const auto go = g.block(seg.offset, h * dh, seg.length, dh);
            const auto qs = Q.block(seg.offset, h * dh, seg.length, dh);
            const auto ks = K.block(seg.offset, h * dh, seg.length, dh);
            const auto vs = V.block(seg.offset, h * dh, seg.length, dh);
            dV.block(seg.offset, h * dh, seg.length, dh).noalias() = P.transpose() * go;
            const Mat dP = go * vs.transpose();
            Mat dS = P.cwiseProduct(dP);
            const Vec row_dot = dS.rowwise().sum();
            dS -= (P.array().colwise() * row_dot.array()).matrix();
            dS *= inv_sqrt;
            dQ.block(seg.offset, h * dh, seg.length, dh).noalias() = dS * ks;
            dK.block(seg.offset, h * dh, seg.length, dh).noalias() = dS.transpose() * qs;
          }
        }
        t.accumulate(q, dQ);
        t.accumulate(k, dK);
        t.accumulate(v, dV);
      });
}

}  // namespace umf::ag
