#pragma once

#include <cstdint>
#include <vector>

#include "hbfp/tensor.hpp"

namespace hbfp {

struct TripletConfig {
  double margin = 0.3;
  std::size_t p_ids = 16;
  std::size_t k_per_id = 4;
};

struct SmoothingConfig {
  double epsilon = 0.3;
  std::size_t num_classes = 0;
};

// Batch-hard triplet loss over a P*K batch: per anchor, hardest positive
// (self excluded) minus hardest negative Euclidean distance, hinged at the
// margin, summed over anchors. Squared distances are clamped at zero before
// the square root.
Tensor batch_hard_triplet(const Tensor& embeddings, const std::vector<std::uint32_t>& labels,
                          const TripletConfig& cfg);

// Label-smoothed cross entropy. logits: [C] for a single sample or [B,C]
// batched (loss is the batch mean). Targets follow q_y = 1 - (C-1)/C * eps,
// q_other = eps / C; log-sum-exp stabilized.
Tensor label_smoothed_ce(const Tensor& logits, const std::vector<std::uint32_t>& labels,
                         const SmoothingConfig& cfg);
Tensor label_smoothed_ce(const Tensor& logits, std::uint32_t label, const SmoothingConfig& cfg);

// Smoothed target distribution of one label; sums to 1 for any C, eps.
std::vector<double> smoothed_targets(std::uint32_t label, const SmoothingConfig& cfg);

}  // namespace hbfp
