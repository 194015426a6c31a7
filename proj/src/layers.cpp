#include "hbfp/layers.hpp"

#include <cmath>

namespace hbfp {

void ParamRegistry::check_unique(const std::string& name) const {
  for (const auto& [n, t] : params_)
    if (n == name) throw ContractError("registry: '" + name + "' registered twice");
  for (const auto& [n, t] : buffers_)
    if (n == name) throw ContractError("registry: '" + name + "' registered twice");
}

Tensor ParamRegistry::add_param(std::string name, Tensor t) {
  check_unique(name);
  t.set_requires_grad(true);
  t.set_name(name);
  params_.emplace_back(std::move(name), t);
  return t;
}

Tensor ParamRegistry::add_buffer(std::string name, Tensor t) {
  check_unique(name);
  t.set_name(name);
  buffers_.emplace_back(std::move(name), t);
  return t;
}

std::vector<std::pair<std::string, Tensor>> ParamRegistry::all() const {
  auto out = params_;
  out.insert(out.end(), buffers_.begin(), buffers_.end());
  return out;
}

void ParamRegistry::zero_grad() {
  for (auto& [name, t] : params_) t.zero_grad();
}

BatchNorm::BatchNorm(ParamRegistry& reg, const std::string& prefix, std::size_t features,
                     double momentum, double eps)
    : features_(features), momentum_(momentum), eps_(eps) {
  gamma = reg.add_param(prefix + ".gamma", Tensor::full({1, features}, 1.0));
  beta = reg.add_param(prefix + ".beta", Tensor::zeros({1, features}));
  running_mean = reg.add_buffer(prefix + ".running_mean", Tensor::zeros({1, features}));
  running_var = reg.add_buffer(prefix + ".running_var", Tensor::full({1, features}, 1.0));
}

Tensor BatchNorm::forward(const Tensor& x, bool training) {
  if (x.rank() != 2 || x.dim(1) != features_)
    throw ShapeError("batchnorm: expected [R," + std::to_string(features_) + "], got " +
                     shape_str(x.shape()));
  Tensor xhat;
  if (training) {
    Tensor mu = mean_rows(x);
    Tensor centered = sub(x, mu);
    Tensor var = mean_rows(hadamard(centered, centered));
    xhat = hadamard(centered, rsqrt(var, eps_));
    for (std::size_t j = 0; j < features_; ++j) {
      running_mean.at(j) = (1.0 - momentum_) * running_mean.at(j) + momentum_ * mu.at(j);
      running_var.at(j) = (1.0 - momentum_) * running_var.at(j) + momentum_ * var.at(j);
    }
  } else {
    xhat = hadamard(sub(x, running_mean), rsqrt(running_var, eps_));
  }
  return add(hadamard(xhat, gamma), beta);
}

Conv2dLayer::Conv2dLayer(ParamRegistry& reg, const std::string& prefix, std::size_t in_ch,
                         std::size_t out_ch, std::size_t kernel, std::size_t stride,
                         std::size_t pad, std::mt19937_64& rng)
    : stride_pixels(stride), pad_pixels(pad) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(in_ch * kernel * kernel));
  weight = reg.add_param(prefix + ".weight",
                         Tensor::randn({out_ch, in_ch, kernel, kernel}, rng, stddev));
  bias = reg.add_param(prefix + ".bias", Tensor::zeros({out_ch}));
}

Tensor Conv2dLayer::forward(const Tensor& x) const {
  return conv2d(x, weight, bias, stride_pixels, pad_pixels);
}

Linear::Linear(ParamRegistry& reg, const std::string& prefix, std::size_t in, std::size_t out,
               std::mt19937_64& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(in));
  weight = reg.add_param(prefix + ".weight", Tensor::randn({in, out}, rng, stddev));
  bias = reg.add_param(prefix + ".bias", Tensor::zeros({1, out}));
}

Tensor Linear::forward(const Tensor& x) const { return add(matmul(x, weight), bias); }

}  // namespace hbfp
