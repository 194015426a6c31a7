#pragma once

#include <cstdint>
#include <vector>

#include "hbfp/tensor.hpp"

namespace hbfp {

// Euclidean distances between every query/gallery row pair; squared values
// clamped at zero before the square root. q: [Q,D], g: [G,D] -> [Q,G].
Tensor pairwise_distances(const Tensor& q, const Tensor& g);

struct RetrievalItem {
  std::uint32_t identity = 0;
  std::uint32_t camera = 0;
};

struct RetrievalResult {
  std::vector<double> cmc;      // full curve, cmc[k-1] = CMC@k, length |G|
  double mean_ap = 0.0;
  std::size_t skipped_queries = 0;  // queries with no valid positive after exclusion
  double cmc_at(std::size_t k) const;
};

// Market-style protocol: per query, gallery entries sharing both identity and
// camera are excluded; remaining entries rank by distance with ties broken by
// gallery index. CMC@k counts queries with a correct match in the top k; AP
// averages precision at each correct hit.
RetrievalResult evaluate(const Tensor& distances, const std::vector<RetrievalItem>& queries,
                         const std::vector<RetrievalItem>& gallery);

// Plot-ready TSV: one "k cmc" row per requested rank, then a mAP line and a
// skipped-query count.
std::string format_metrics(const RetrievalResult& result, const std::vector<std::size_t>& ranks);

}  // namespace hbfp
