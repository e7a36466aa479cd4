#include "umf/resampling.hpp"

#include "umf/errors.hpp"

#include <cmath>
#include <string>

namespace umf {

Mat downsample(const Mat& seq, int factor) {
  UMF_REQUIRE(is_power_of_two(factor), "downsample: factor must be a power of two");
  UMF_REQUIRE(seq.rows() % factor == 0, "downsample: length " + std::to_string(seq.rows()) +
                                            " not divisible by " + std::to_string(factor));
  if (factor == 1) return seq;
  const Eigen::Index out_len = seq.rows() / factor;
  Mat out = Mat::Zero(out_len, seq.cols());
  for (Eigen::Index i = 0; i < out_len; ++i) {
    for (int j = 0; j < factor; ++j) out.row(i) += seq.row(i * factor + j);
    out.row(i) /= static_cast<double>(factor);
  }
  return out;
}

Mat upsample(const Mat& seq, int factor) {
  UMF_REQUIRE(is_power_of_two(factor), "upsample: factor must be a power of two");
  if (factor == 1) return seq;
  Mat out(seq.rows() * factor, seq.cols());
  for (Eigen::Index i = 0; i < seq.rows(); ++i)
    for (int j = 0; j < factor; ++j) out.row(i * factor + j) = seq.row(i);
  return out;
}

Mat block_covariance(int block_size) {
  UMF_REQUIRE(block_size >= 1, "block covariance: block size must be >= 1");
  return (4.0 / 3.0) * Mat::Identity(block_size, block_size) -
         (1.0 / 3.0) * Mat::Ones(block_size, block_size);
}

Mat block_cholesky(int block_size) {
  UMF_REQUIRE(block_size >= 1 && block_size <= 4,
              "correlated noise: block size must be in [1, 4] for a PSD covariance");
  const Mat cov = block_covariance(block_size);
  const int n = block_size;
  Mat L = Mat::Zero(n, n);
  for (int j = 0; j < n; ++j) {
    double d = cov(j, j);
    for (int k = 0; k < j; ++k) d -= L(j, k) * L(j, k);
    if (d <= 1e-12) continue;  // singular direction; column stays zero
    L(j, j) = std::sqrt(d);
    for (int i = j + 1; i < n; ++i) {
      double v = cov(i, j);
      for (int k = 0; k < j; ++k) v -= L(i, k) * L(j, k);
      L(i, j) = v / L(j, j);
    }
  }
  return L;
}

Mat sample_correlated_noise(int length, int dim, int block_size, Rng& rng) {
  UMF_REQUIRE(block_size >= 1 && block_size <= 4,
              "correlated noise: block size must be in [1, 4] for a PSD covariance");
  UMF_REQUIRE(length % block_size == 0, "correlated noise: length " + std::to_string(length) +
                                            " not divisible by block size " +
                                            std::to_string(block_size));
  const Mat L = block_cholesky(block_size);
  Mat out(length, dim);
  Vec xi(block_size);
  for (int b = 0; b < length / block_size; ++b) {
    for (int c = 0; c < dim; ++c) {
      for (int i = 0; i < block_size; ++i) xi(i) = rng.normal();
      const Vec draw = L * xi;
      for (int i = 0; i < block_size; ++i) out(b * block_size + i, c) = draw(i);
    }
  }
  return out;
}

}  // namespace umf
