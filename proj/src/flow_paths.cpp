#include "umf/flow_paths.hpp"

#include "umf/errors.hpp"
#include "umf/resampling.hpp"

namespace umf {

PathSample linear_interpolate(const Mat& x0, const Mat& x1, double t) {
  UMF_REQUIRE(same_shape(x0, x1), "linear_interpolate: shape mismatch");
  UMF_REQUIRE(t >= 0.0 && t <= 1.0, "linear_interpolate: t must lie in [0, 1]");
  PathSample out;
  out.point = t * x1 + (1.0 - t) * x0;
  out.target = x1 - x0;
  out.t_global = t;
  return out;
}

std::pair<Mat, Mat> pyramid_endpoints(const Mat& z1, const Mat& eps, int k,
                                      const PyramidSchedule& schedule) {
  UMF_REQUIRE(k >= 1 && k <= schedule.stages(), "pyramid_endpoints: stage out of range");
  UMF_REQUIRE(z1.rows() == schedule.base_length(),
              "pyramid_endpoints: z1 must be at full resolution");
  UMF_REQUIRE(eps.rows() == schedule.length(k) && eps.cols() == z1.cols(),
              "pyramid_endpoints: eps shape does not match the stage-k resolution");
  const auto& w = schedule.window(k);
  Mat start = (1.0 - w.start) * eps;
  // At s_K = 0 the coarser data term vanishes and Down(z1, 2^K) need not exist.
  if (w.start != 0.0) start += w.start * upsample(downsample(z1, 2 * schedule.factor(k)), 2);
  Mat end = w.end * downsample(z1, schedule.factor(k)) + (1.0 - w.end) * eps;
  return {std::move(start), std::move(end)};
}

PathSample pyramid_point_and_target(const Mat& z1, const Mat& eps, int k, double t_global,
                                    const PyramidSchedule& schedule) {
  const auto& w = schedule.window(k);
  const double local = rescale_time(t_global, w.start, w.end);
  auto [start, end] = pyramid_endpoints(z1, eps, k, schedule);
  PathSample out;
  out.point = local * end + (1.0 - local) * start;
  out.target = end - start;
  out.t_global = t_global;
  out.stage = k;
  return out;
}

Mat jump_update_with_alpha(const Mat& end_k, double s_next, double e_k, double alpha, Rng& rng) {
  UMF_REQUIRE(0.0 < s_next && s_next < e_k && e_k < 1.0,
              "jump_update: need 0 < s_{k-1} < e_k < 1");
  Mat out = (s_next / e_k) * upsample(end_k, 2);
  out += alpha * sample_correlated_noise(static_cast<int>(out.rows()),
                                         static_cast<int>(out.cols()), 2, rng);
  return out;
}

Mat jump_update(const Mat& end_k, double s_next, double e_k, Rng& rng) {
  return jump_update_with_alpha(end_k, s_next, e_k, jump_coefficients(s_next).alpha, rng);
}

PathSample reaction_interpolate(const Mat& context, const Mat& reaction, double t) {
  UMF_REQUIRE(same_shape(context, reaction), "reaction_interpolate: shape mismatch");
  UMF_REQUIRE(t >= 0.0 && t <= 1.0, "reaction_interpolate: t must lie in [0, 1]");
  PathSample out;
  out.point = t * reaction + (1.0 - t) * context;
  out.target = reaction - context;
  out.t_global = t;
  return out;
}

PathSample context_interpolate(const Mat& eps, const Mat& context, double t) {
  return linear_interpolate(eps, context, t);
}

}  // namespace umf
