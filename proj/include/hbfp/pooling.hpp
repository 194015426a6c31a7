#pragma once

#include <vector>

#include "hbfp/tensor.hpp"

namespace hbfp {

// Threshold schedule for generalized pooling. lambda=0 reproduces average
// pooling, lambda=1 max pooling; intermediate values keep the per-channel
// activations whose min-max-normalized magnitude reaches the threshold.
struct GPConfig {
  std::vector<double> lambdas = {0.0, 0.3, 0.5, 0.7, 1.0};
};

// Per channel (row): (f - min) / (max - min). Constant rows normalize to 1 so
// the lambda=1 => max identity holds for them too.
Tensor minmax_normalize(const Tensor& f);

// f: [D,N]. Keeps values whose normalized counterpart is >= lambda, then
// averages the survivors per channel (the row max always survives). Gradient
// flows through survivors only, like max-pool routing.
Tensor generalized_pool(const Tensor& f, double lambda);

// Sum of generalized_pool over the configured thresholds. -> [D]
Tensor multi_lambda_descriptor(const Tensor& f, const GPConfig& cfg);

// Stacked-rows convenience: rows is [(B*N) x D] with contiguous per-element
// blocks; returns [B x D] of per-element descriptors.
Tensor multi_lambda_descriptor_batch(const Tensor& rows, std::size_t batch, const GPConfig& cfg);

}  // namespace hbfp
