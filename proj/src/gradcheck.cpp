#include "hbfp/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "hbfp/rng.hpp"

namespace hbfp {

std::vector<double> autodiff_gradient(const ScalarFn& f, const Tensor& x) {
  Tensor leaf = Tensor::from_data(x.shape(), x.values(), true);
  Tensor loss = f(leaf);
  if (loss.numel() != 1)
    throw ContractError("autodiff_gradient: f must be scalar-valued, got " +
                        shape_str(loss.shape()));
  backward(loss);
  return leaf.grad();
}

double finite_diff_check(const ScalarFn& f, const Tensor& x, double eps) {
  const std::vector<double> g = autodiff_gradient(f, x);
  NoGradGuard no_grad;
  Tensor probe = Tensor::from_data(x.shape(), x.values(), false);
  double worst = 0.0;
  for (std::size_t i = 0; i < probe.numel(); ++i) {
    const double saved = probe.at(i);
    probe.at(i) = saved + eps;
    const double up = f(probe).at(0);
    probe.at(i) = saved - eps;
    const double down = f(probe).at(0);
    probe.at(i) = saved;
    const double fd = (up - down) / (2.0 * eps);
    const double denom = std::max({std::fabs(g[i]), std::fabs(fd), 1e-8});
    worst = std::max(worst, std::fabs(g[i] - fd) / denom);
  }
  return worst;
}

GradCheckResult run_gradcheck_case(const GradCheckCase& case_, std::size_t num_seeds, double eps,
                                   double kink_margin) {
  GradCheckResult result;
  result.name = case_.name;
  result.tolerance = case_.tolerance;
  for (std::size_t seed = 0; seed < num_seeds; ++seed) {
    // Kink-avoiding sampling: probe the forward pass and reseed while the
    // evaluation point sits within `kink_margin` of a selector boundary.
    std::pair<ScalarFn, Tensor> instance;
    bool found = false;
    for (std::uint64_t attempt = 0; attempt < 64 && !found; ++attempt) {
      instance = case_.build(hash_stream(seed, "gradcheck-instance", attempt));
      KinkMeter meter;
      {
        KinkScope scope(meter);
        NoGradGuard no_grad;
        Tensor probe = Tensor::from_data(instance.second.shape(), instance.second.values(), false);
        (void)instance.first(probe);
      }
      found = meter.min_margin >= kink_margin;
    }
    if (!found)
      throw ContractError("gradcheck '" + case_.name + "': no kink-free sample after 64 attempts");
    result.max_rel_err = std::max(result.max_rel_err, finite_diff_check(instance.first,
                                                                        instance.second, eps));
  }
  result.passed = result.max_rel_err < case_.tolerance;
  return result;
}

}  // namespace hbfp
