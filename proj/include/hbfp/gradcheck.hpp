#pragma once

#include <functional>
#include <string>
#include <vector>

#include "hbfp/tensor.hpp"

namespace hbfp {

using ScalarFn = std::function<Tensor(const Tensor&)>;

// Reverse-mode gradient of f at x; f must return a scalar.
std::vector<double> autodiff_gradient(const ScalarFn& f, const Tensor& x);

// Central-difference check of f's gradient at x: per coordinate,
// (f(x+eps*e_i) - f(x-eps*e_i)) / (2*eps) against autodiff, relative error
// with denominator max(|g|, |fd|, denom_floor). Returns the max over
// coordinates. Deep composites raise the floor: forward-pass rounding noise
// (~1e-14 absolute) divided by 2*eps is irreducible, so coordinates whose
// true gradient sits below the floor cannot be measured to a relative
// tolerance and are compared against the floor instead.
double finite_diff_check(const ScalarFn& f, const Tensor& x, double eps = 1e-5,
                         double denom_floor = 1e-8);

// Named gradient-check case over seeded random instances. `build` returns the
// (f, x) pair for one seed; the runner resamples (bounded retries) whenever the
// forward pass reports a kink margin below `kink_margin`.
struct GradCheckCase {
  std::string name;
  double tolerance = 1e-4;
  std::function<std::pair<ScalarFn, Tensor>(std::uint64_t seed)> build;
};

struct GradCheckResult {
  std::string name;
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

// Runs `case_.build` for seeds 0..num_seeds-1 and returns the worst error.
GradCheckResult run_gradcheck_case(const GradCheckCase& case_, std::size_t num_seeds,
                                   double eps = 1e-5, double kink_margin = 1e-3);

}  // namespace hbfp
