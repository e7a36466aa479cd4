#include "umf/schedule.hpp"

#include "umf/errors.hpp"
#include "umf/tensor.hpp"

#include <json.hpp>

#include <cmath>
#include <string>

namespace umf {

double chained_end(double next_start) { return 2.0 * next_start / (1.0 + next_start); }

JumpCoefficients jump_coefficients(double s_next) {
  UMF_REQUIRE(s_next > 0.0 && s_next < 1.0, "jump_coefficients: s_next must lie in (0, 1)");
  return {(1.0 + s_next) / 2.0, std::sqrt(3.0) * (1.0 - s_next) / 2.0};
}

double rescale_time(double t, double window_start, double window_end) {
  UMF_REQUIRE(window_start < window_end, "rescale_time: empty window");
  UMF_REQUIRE(t >= window_start && t <= window_end,
              "rescale_time: t=" + std::to_string(t) + " outside window [" +
                  std::to_string(window_start) + ", " + std::to_string(window_end) + "]");
  return (t - window_start) / (window_end - window_start);
}

PyramidSchedule::PyramidSchedule(int base_length, std::vector<StageWindow> windows,
                                 std::vector<int> steps)
    : base_length_(base_length), windows_(std::move(windows)), steps_(std::move(steps)) {
  validate();
}

PyramidSchedule PyramidSchedule::build(int stages, int base_length, std::vector<int> steps,
                                       double full_res_start) {
  UMF_REQUIRE(stages >= 1, "schedule: stage count must be >= 1");
  UMF_REQUIRE(stages < 31, "schedule: stage count too large");
  UMF_REQUIRE(static_cast<int>(steps.size()) == stages,
              "schedule: need one step count per stage");
  if (stages == 1) return PyramidSchedule(base_length, {{0.0, 1.0}}, std::move(steps));
  UMF_REQUIRE(full_res_start > 0.0 && full_res_start < 1.0,
              "schedule: full-resolution start s_1 must lie in (0, 1)");

  // starts[k-1] = s_k, ends[k-1] = e_k.
  std::vector<double> starts(stages), ends(stages);
  starts[0] = full_res_start;
  ends[0] = 1.0;
  for (int k = 2; k <= stages; ++k) {
    ends[k - 1] = chained_end(starts[k - 2]);
    starts[k - 1] = (k == stages) ? 0.0 : ends[k - 1] / 2.0;
  }
  std::vector<StageWindow> windows;
  for (int k = stages; k >= 1; --k) windows.push_back({starts[k - 1], ends[k - 1]});
  return PyramidSchedule(base_length, std::move(windows), std::move(steps));
}

PyramidSchedule PyramidSchedule::from_windows(int base_length, std::vector<StageWindow> windows,
                                              std::vector<int> steps) {
  return PyramidSchedule(base_length, std::move(windows), std::move(steps));
}

void PyramidSchedule::validate() const {
  const int K = stages();
  UMF_REQUIRE(K >= 1, "schedule: stage count must be >= 1");
  UMF_REQUIRE(static_cast<int>(steps_.size()) == K, "schedule: need one step count per stage");
  UMF_REQUIRE(base_length_ >= 1, "schedule: base_length must be >= 1");
  UMF_REQUIRE(base_length_ % (1 << (K - 1)) == 0,
              "schedule: base_length " + std::to_string(base_length_) +
                  " not divisible by 2^(K-1) = " + std::to_string(1 << (K - 1)));
  for (int s : steps_) UMF_REQUIRE(s >= 1, "schedule: step counts must be >= 1");
  for (const auto& w : windows_)
    UMF_REQUIRE(0.0 <= w.start && w.start < w.end && w.end <= 1.0,
                "schedule: every window needs 0 <= s_k < e_k <= 1");
  UMF_REQUIRE(windows_.front().start == 0.0, "schedule: s_K must be 0");
  UMF_REQUIRE(windows_.back().end == 1.0, "schedule: e_1 must be 1");
  for (int k = K; k >= 2; --k) {
    const double e_k = window(k).end;
    const double s_prev = window(k - 1).start;
    UMF_REQUIRE(s_prev > 0.0, "schedule: s_k must be > 0 for k < K");
    UMF_REQUIRE(std::abs(e_k - chained_end(s_prev)) <= 1e-12,
                "schedule: e_" + std::to_string(k) + " violates e_k = 2 s_{k-1} / (1 + s_{k-1})");
  }
}

const StageWindow& PyramidSchedule::window(int k) const {
  UMF_REQUIRE(k >= 1 && k <= stages(), "schedule: stage index out of range");
  return windows_[stages() - k];
}

int PyramidSchedule::steps(int k) const {
  UMF_REQUIRE(k >= 1 && k <= stages(), "schedule: stage index out of range");
  return steps_[stages() - k];
}

int PyramidSchedule::total_steps() const {
  int n = 0;
  for (int s : steps_) n += s;
  return n;
}

std::string PyramidSchedule::to_json() const {
  nlohmann::json windows = nlohmann::json::array();
  for (const auto& w : windows_) windows.push_back({w.start, w.end});
  return nlohmann::json{{"base_length", base_length_}, {"windows", windows}, {"steps", steps_}}
      .dump();
}

PyramidSchedule PyramidSchedule::from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  std::vector<StageWindow> windows;
  for (const auto& w : j.at("windows")) {
    UMF_REQUIRE(w.is_array() && w.size() == 2, "schedule: each window is [start, end]");
    windows.push_back({w[0].get<double>(), w[1].get<double>()});
  }
  return from_windows(j.at("base_length").get<int>(), std::move(windows),
                      j.at("steps").get<std::vector<int>>());
}

}  // namespace umf
