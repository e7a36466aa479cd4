#pragma once

#include <string>
#include <vector>

namespace umf {

// Time window [start, end] of one pyramid stage.
struct StageWindow {
  double start = 0.0;
  double end = 1.0;
};

// Coefficients of the stage-(k) -> stage-(k-1) transition:
//   z_start(k-1) = scale * Up(z_end(k)) + alpha * n',  n' ~ N(0, Sigma').
struct JumpCoefficients {
  double scale = 0.0;
  double alpha = 0.0;
};

// Decomposition of flow time [0, 1] into K resolution stages. Stages are
// numbered as in the inference loop: k = K runs first at the coarsest
// resolution, k = 1 runs last at full resolution. Immutable once built.
class PyramidSchedule {
 public:
  // Chains the windows from s_1 (`full_res_start`) using e_k = 2 s_{k-1} / (1 + s_{k-1}).
  // Intermediate stage starts are placed at s_k = e_k / 2; s_K = 0.
  static PyramidSchedule build(int stages, int base_length, std::vector<int> steps,
                               double full_res_start);

  // Explicit windows in execution order (stage K first). Validates every invariant.
  static PyramidSchedule from_windows(int base_length, std::vector<StageWindow> windows,
                                      std::vector<int> steps);

  int stages() const { return static_cast<int>(windows_.size()); }
  int base_length() const { return base_length_; }

  // Accessors by stage number k in [1, K].
  const StageWindow& window(int k) const;
  int steps(int k) const;
  int factor(int k) const { return 1 << (k - 1); }
  int length(int k) const { return base_length_ / factor(k); }

  // Execution-order views (index 0 is stage K).
  const std::vector<StageWindow>& windows() const { return windows_; }
  const std::vector<int>& step_counts() const { return steps_; }

  int total_steps() const;

  // {"base_length": n, "windows": [[s, e], ...], "steps": [...]}, execution order.
  std::string to_json() const;
  static PyramidSchedule from_json(const std::string& text);

 private:
  PyramidSchedule(int base_length, std::vector<StageWindow> windows, std::vector<int> steps);
  void validate() const;

  int base_length_;
  std::vector<StageWindow> windows_;
  std::vector<int> steps_;
};

// e_k paired with the next stage's start: 2 s / (1 + s).
double chained_end(double next_start);

// Closed-form jump coefficients for the renoised start s_next in (0, 1).
JumpCoefficients jump_coefficients(double s_next);

// Local time t' = (t - s) / (e - s) of the window [s, e].
double rescale_time(double t, double window_start, double window_end);

}  // namespace umf
