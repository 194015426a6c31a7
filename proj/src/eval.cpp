#include "hbfp/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace hbfp {

Tensor pairwise_distances(const Tensor& q, const Tensor& g) {
  if (q.rank() != 2 || g.rank() != 2 || q.dim(1) != g.dim(1))
    throw ShapeError("pairwise_distances: dimension mismatch, " + shape_str(q.shape()) + " vs " +
                     shape_str(g.shape()));
  const std::size_t nq = q.dim(0), ng = g.dim(0), d = q.dim(1);
  auto out = detail::make_op_node({nq, ng}, "pairwise_distances", {q.node(), g.node()});
  const double* pq = q.values().data();
  const double* pg = g.values().data();
  for (std::size_t i = 0; i < nq; ++i)
    for (std::size_t j = 0; j < ng; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = pq[i * d + k] - pg[j * d + k];
        acc += diff * diff;
      }
      const double dist = std::sqrt(std::max(acc, 0.0));
      kink_note(dist);
      out->data[i * ng + j] = dist;
    }
  if (detail::is_recording(out)) {
    detail::TensorNode* o = out.get();
    detail::TensorNode* nqn = q.node().get();
    detail::TensorNode* ngn = g.node().get();
    out->backprop = [o, nqn, ngn, nq, ng, d] {
      for (std::size_t i = 0; i < nq; ++i)
        for (std::size_t j = 0; j < ng; ++j) {
          const double dist = o->data[i * ng + j];
          if (dist <= 1e-12) continue;
          const double s = o->grad[i * ng + j] / dist;
          for (std::size_t k = 0; k < d; ++k) {
            const double diff = nqn->data[i * d + k] - ngn->data[j * d + k];
            if (nqn->requires_grad) nqn->grad[i * d + k] += s * diff;
            if (ngn->requires_grad) ngn->grad[j * d + k] -= s * diff;
          }
        }
    };
  }
  return Tensor(out);
}

double RetrievalResult::cmc_at(std::size_t k) const {
  if (k == 0 || cmc.empty()) return 0.0;
  return cmc[std::min(k, cmc.size()) - 1];
}

RetrievalResult evaluate(const Tensor& distances, const std::vector<RetrievalItem>& queries,
                         const std::vector<RetrievalItem>& gallery) {
  if (distances.rank() != 2 || distances.dim(0) != queries.size() ||
      distances.dim(1) != gallery.size())
    throw ShapeError("evaluate: distance matrix " + shape_str(distances.shape()) +
                     " does not match " + std::to_string(queries.size()) + " queries x " +
                     std::to_string(gallery.size()) + " gallery entries");
  const std::size_t nq = queries.size(), ng = gallery.size();

  RetrievalResult result;
  result.cmc.assign(ng, 0.0);
  double ap_total = 0.0;
  std::size_t evaluated = 0;

  std::vector<std::size_t> order(ng);
  for (std::size_t qi = 0; qi < nq; ++qi) {
    // same-identity same-camera entries are excluded from this query's ranking
    std::vector<std::size_t> valid;
    valid.reserve(ng);
    for (std::size_t gi = 0; gi < ng; ++gi) {
      if (gallery[gi].identity == queries[qi].identity && gallery[gi].camera == queries[qi].camera)
        continue;
      valid.push_back(gi);
    }
    std::size_t positives = 0;
    for (std::size_t gi : valid) positives += gallery[gi].identity == queries[qi].identity;
    if (positives == 0) {
      ++result.skipped_queries;
      continue;
    }

    order.assign(valid.begin(), valid.end());
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return distances.at(qi, a) < distances.at(qi, b);
    });

    bool hit = false;
    std::size_t hits = 0;
    double ap = 0.0;
    for (std::size_t rank = 0; rank < order.size(); ++rank) {
      if (gallery[order[rank]].identity != queries[qi].identity) continue;
      if (!hit) {
        hit = true;
        for (std::size_t k = rank; k < ng; ++k) result.cmc[k] += 1.0;
      }
      ++hits;
      ap += static_cast<double>(hits) / static_cast<double>(rank + 1);
    }
    ap_total += ap / static_cast<double>(positives);
    ++evaluated;
  }

  if (evaluated == 0) throw ContractError("evaluate: every query was skipped");
  for (double& v : result.cmc) v /= static_cast<double>(evaluated);
  result.mean_ap = ap_total / static_cast<double>(evaluated);
  return result;
}

std::string format_metrics(const RetrievalResult& result, const std::vector<std::size_t>& ranks) {
  std::ostringstream os;
  os.precision(17);
  os << "k\tcmc\n";
  for (std::size_t k : ranks) os << k << "\t" << result.cmc_at(k) << "\n";
  os << "mAP\t" << result.mean_ap << "\n";
  os << "# skipped_queries\t" << result.skipped_queries << "\n";
  return os.str();
}

}  // namespace hbfp
