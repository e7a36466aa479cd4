#pragma once

#include "umf/evaluation.hpp"
#include "umf/nn.hpp"

#include <functional>
#include <string>
#include <vector>

namespace umf {

// Central differences against tape gradients for up to `per_param` entries of
// every parameter. Entries where both sides are below 1e-8 count as agreeing.
struct GradientCheck {
  double max_rel_error = 0.0;
  int checked = 0;
  std::string worst;
};
GradientCheck check_gradients(nn::ParamStore& store,
                              const std::function<ag::Var(nn::Binder&)>& loss, int per_param = 6,
                              double h = 1e-5);

// Window ends and corrective-noise scale recomputed numerically (bisection on the
// covariance-matching conditions) for several s, against the closed forms.
EvalReport verify_closed_forms();

// One-stage pyramid against a plain rectified flow on shared random streams:
// training points/targets and sampling trajectories must agree bitwise.
EvalReport verify_single_stage(int cases, std::uint64_t seed);

// Down/up-sampling identities and the Monte-Carlo covariance of the corrective noise.
EvalReport verify_resampling(std::uint64_t seed);

// VAE, P-Flow and S-Flow (net and adapter) losses on micro-models.
EvalReport verify_gradients(int cases, std::uint64_t seed, const Tolerances& tol);

// Every suite above plus jump continuity and solver order.
std::vector<EvalReport> run_verification(const Tolerances& tol, std::uint64_t seed, int jump_draws,
                                         const std::vector<int>& order_steps, int gradient_cases);

}  // namespace umf
