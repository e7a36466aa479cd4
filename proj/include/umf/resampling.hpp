#pragma once

#include "umf/rng.hpp"
#include "umf/tensor.hpp"

namespace umf {

// Temporal average pooling over non-overlapping windows of `factor` tokens.
Mat downsample(const Mat& seq, int factor);

// Nearest-neighbour upsampling: each token repeated `factor` times.
Mat upsample(const Mat& seq, int factor);

// Block noise covariance used at jump points: unit diagonal, -1/3 within a
// block, zero across blocks and channels.
struct CorrelatedNoiseSpec {
  int block_size = 2;
  double off_diag = -1.0 / 3.0;
};

Mat block_covariance(int block_size);

// Lower-triangular L with L L^T = block_covariance(block_size). Tolerates the
// singular (PSD) case block_size = 4.
Mat block_cholesky(int block_size);

// length x dim array; each channel's consecutive `block_size` tokens are one
// N(0, Sigma') draw; blocks and channels independent.
Mat sample_correlated_noise(int length, int dim, int block_size, Rng& rng);

}  // namespace umf
