#pragma once

#include "umf/rng.hpp"
#include "umf/schedule.hpp"
#include "umf/tensor.hpp"

#include <utility>

namespace umf {

// A point on a straight conditional path and the velocity the network regresses.
struct PathSample {
  Mat point;
  Mat target;
  double t_global = 0.0;
  int stage = 0;  // pyramid stage k, 0 when not a pyramid sample
};

// x_t = t x1 + (1 - t) x0, target x1 - x0.
PathSample linear_interpolate(const Mat& x0, const Mat& x1, double t);

// Coupled endpoints of stage k for data z1 (full resolution) and stage-k noise eps:
//   start = s_k Up(Down(z1, 2^k), 2) + (1 - s_k) eps
//   end   = e_k Down(z1, 2^(k-1))    + (1 - e_k) eps
std::pair<Mat, Mat> pyramid_endpoints(const Mat& z1, const Mat& eps, int k,
                                      const PyramidSchedule& schedule);

PathSample pyramid_point_and_target(const Mat& z1, const Mat& eps, int k, double t_global,
                                    const PyramidSchedule& schedule);

// Renoised start of stage k-1 from a stage-k endpoint: (s_next / e_k) Up(end_k) + alpha n'.
Mat jump_update(const Mat& end_k, double s_next, double e_k, Rng& rng);

// Same transition with an explicit corrective-noise magnitude (negative controls).
Mat jump_update_with_alpha(const Mat& end_k, double s_next, double e_k, double alpha, Rng& rng);

// Reaction path: context C -> reaction W.
PathSample reaction_interpolate(const Mat& context, const Mat& reaction, double t);

// Context path: noise -> context C.
PathSample context_interpolate(const Mat& eps, const Mat& context, double t);

}  // namespace umf
