#pragma once

#include <Eigen/Dense>

#include <cstddef>

namespace umf {

// Token arrays are row-major: one row per token (or frame), one column per channel.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;
using Vec = Eigen::VectorXd;

inline bool all_finite(const Mat& m) { return m.allFinite(); }

inline bool same_shape(const Mat& a, const Mat& b) {
  return a.rows() == b.rows() && a.cols() == b.cols();
}

inline bool is_power_of_two(long n) { return n > 0 && (n & (n - 1)) == 0; }

}  // namespace umf
