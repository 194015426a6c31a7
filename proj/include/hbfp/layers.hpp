#pragma once

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "hbfp/tensor.hpp"

namespace hbfp {

// Every learnable tensor and persistent buffer is registered here exactly
// once under a unique name; the optimizer walks params(), checkpoints walk
// both lists.
class ParamRegistry {
 public:
  Tensor add_param(std::string name, Tensor t);
  Tensor add_buffer(std::string name, Tensor t);

  const std::vector<std::pair<std::string, Tensor>>& params() const { return params_; }
  const std::vector<std::pair<std::string, Tensor>>& buffers() const { return buffers_; }
  std::vector<std::pair<std::string, Tensor>> all() const;

  void zero_grad();

 private:
  void check_unique(const std::string& name) const;
  std::vector<std::pair<std::string, Tensor>> params_;
  std::vector<std::pair<std::string, Tensor>> buffers_;
};

// 1-d batch normalization over rows: x is [R,F], statistics are per feature
// column. Training mode normalizes with batch statistics and refreshes the
// running buffers; eval mode uses the buffers.
class BatchNorm {
 public:
  BatchNorm(ParamRegistry& reg, const std::string& prefix, std::size_t features,
            double momentum = 0.1, double eps = 1e-5);

  Tensor forward(const Tensor& x, bool training);

  Tensor gamma, beta;
  Tensor running_mean, running_var;

 private:
  std::size_t features_;
  double momentum_, eps_;
};

class Conv2dLayer {
 public:
  Conv2dLayer(ParamRegistry& reg, const std::string& prefix, std::size_t in_ch, std::size_t out_ch,
              std::size_t kernel, std::size_t stride, std::size_t pad, std::mt19937_64& rng);

  Tensor forward(const Tensor& x) const;  // x: [B,Cin,H,W]

  Tensor weight, bias;
  std::size_t stride_pixels, pad_pixels;
};

class Linear {
 public:
  Linear(ParamRegistry& reg, const std::string& prefix, std::size_t in, std::size_t out,
         std::mt19937_64& rng);

  Tensor forward(const Tensor& x) const;  // x: [R,in] -> [R,out]

  Tensor weight, bias;
};

}  // namespace hbfp
