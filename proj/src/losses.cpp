#include "hbfp/losses.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace hbfp {

namespace {

using detail::TensorNode;

constexpr double kDistFloor = 1e-12;  // skip gradient routing through zero-length differences

double pair_distance(const double* e, std::size_t a, std::size_t b, std::size_t d) {
  double acc = 0.0;
  const double* pa = e + a * d;
  const double* pb = e + b * d;
  for (std::size_t i = 0; i < d; ++i) {
    const double diff = pa[i] - pb[i];
    acc += diff * diff;
  }
  return std::sqrt(std::max(acc, 0.0));
}

}  // namespace

Tensor batch_hard_triplet(const Tensor& embeddings, const std::vector<std::uint32_t>& labels,
                          const TripletConfig& cfg) {
  if (embeddings.rank() != 2)
    throw ShapeError("batch_hard_triplet: expected [B,D] embeddings, got " +
                     shape_str(embeddings.shape()));
  const std::size_t rows = embeddings.dim(0), d = embeddings.dim(1);
  if (labels.size() != rows)
    throw ContractError("batch_hard_triplet: " + std::to_string(labels.size()) + " labels for " +
                        std::to_string(rows) + " embeddings");
  if (rows != cfg.p_ids * cfg.k_per_id)
    throw ContractError("batch_hard_triplet: batch of " + std::to_string(rows) +
                        " is not P*K = " + std::to_string(cfg.p_ids) + "*" +
                        std::to_string(cfg.k_per_id));
  std::map<std::uint32_t, std::size_t> per_id;
  for (std::uint32_t l : labels) ++per_id[l];
  if (per_id.size() != cfg.p_ids)
    throw ContractError("batch_hard_triplet: found " + std::to_string(per_id.size()) +
                        " identities, expected P = " + std::to_string(cfg.p_ids));
  for (const auto& [id, count] : per_id) {
    if (count != cfg.k_per_id)
      throw ContractError("batch_hard_triplet: identity " + std::to_string(id) + " has " +
                          std::to_string(count) + " samples, expected K = " +
                          std::to_string(cfg.k_per_id));
  }

  const double* e = embeddings.values().data();
  std::vector<double> dist(rows * rows, 0.0);
  for (std::size_t a = 0; a < rows; ++a)
    for (std::size_t b = a + 1; b < rows; ++b) {
      const double v = pair_distance(e, a, b, d);
      dist[a * rows + b] = v;
      dist[b * rows + a] = v;
      kink_note(v);  // coincident points make the distance non-smooth
    }

  struct Anchor {
    std::size_t pos = 0, neg = 0;
    bool active = false;
  };
  std::vector<Anchor> mined(rows);
  auto out = detail::make_op_node({1}, "batch_hard_triplet", {embeddings.node()});
  double loss = 0.0;
  for (std::size_t a = 0; a < rows; ++a) {
    double hardest_pos = -1.0, second_pos = -1.0;
    double hardest_neg = 1e300, second_neg = 1e300;
    std::size_t pos_idx = a, neg_idx = a;
    for (std::size_t o = 0; o < rows; ++o) {
      if (o == a) continue;
      const double v = dist[a * rows + o];
      if (labels[o] == labels[a]) {
        if (v > hardest_pos) {
          second_pos = hardest_pos;
          hardest_pos = v;
          pos_idx = o;
        } else {
          second_pos = std::max(second_pos, v);
        }
      } else {
        if (v < hardest_neg) {
          second_neg = hardest_neg;
          hardest_neg = v;
          neg_idx = o;
        } else {
          second_neg = std::min(second_neg, v);
        }
      }
    }
    // mining-selection and hinge-activation margins
    if (second_pos >= 0.0) kink_note(hardest_pos - second_pos);
    if (second_neg < 1e300) kink_note(second_neg - hardest_neg);
    const double hinge = hardest_pos - hardest_neg + cfg.margin;
    kink_note(std::fabs(hinge));
    if (hinge > 0.0) {
      loss += hinge;
      mined[a] = {pos_idx, neg_idx, true};
    }
  }
  out->data[0] = loss;

  if (detail::is_recording(out)) {
    TensorNode* o = out.get();
    TensorNode* ne = embeddings.node().get();
    out->backprop = [o, ne, mined, dist, rows, d] {
      if (!ne->requires_grad) return;
      const double g = o->grad[0];
      const double* e = ne->data.data();
      double* de = ne->grad.data();
      for (std::size_t a = 0; a < rows; ++a) {
        if (!mined[a].active) continue;
        const std::size_t p = mined[a].pos, ng = mined[a].neg;
        const double dp = dist[a * rows + p];
        const double dn = dist[a * rows + ng];
        if (dp > kDistFloor) {
          const double s = g / dp;
          for (std::size_t i = 0; i < d; ++i) {
            const double diff = e[a * d + i] - e[p * d + i];
            de[a * d + i] += s * diff;
            de[p * d + i] -= s * diff;
          }
        }
        if (dn > kDistFloor) {
          const double s = g / dn;
          for (std::size_t i = 0; i < d; ++i) {
            const double diff = e[a * d + i] - e[ng * d + i];
            de[a * d + i] -= s * diff;
            de[ng * d + i] += s * diff;
          }
        }
      }
    };
  }
  return Tensor(out);
}

std::vector<double> smoothed_targets(std::uint32_t label, const SmoothingConfig& cfg) {
  if (cfg.num_classes < 2)
    throw ContractError("smoothed_targets: need at least 2 classes, got " +
                        std::to_string(cfg.num_classes));
  if (!(cfg.epsilon >= 0.0 && cfg.epsilon < 1.0))
    throw ContractError("smoothed_targets: epsilon must lie in [0,1), got " +
                        std::to_string(cfg.epsilon));
  if (label >= cfg.num_classes)
    throw ContractError("smoothed_targets: label " + std::to_string(label) + " out of range C=" +
                        std::to_string(cfg.num_classes));
  const double c = static_cast<double>(cfg.num_classes);
  std::vector<double> q(cfg.num_classes, cfg.epsilon / c);
  q[label] = 1.0 - (c - 1.0) / c * cfg.epsilon;
  return q;
}

Tensor label_smoothed_ce(const Tensor& logits, const std::vector<std::uint32_t>& labels,
                         const SmoothingConfig& cfg) {
  std::size_t batch = 1, classes = 0;
  if (logits.rank() == 1) {
    classes = logits.dim(0);
  } else if (logits.rank() == 2) {
    batch = logits.dim(0);
    classes = logits.dim(1);
  } else {
    throw ShapeError("label_smoothed_ce: expected [C] or [B,C] logits, got " +
                     shape_str(logits.shape()));
  }
  if (classes != cfg.num_classes)
    throw ShapeError("label_smoothed_ce: logits " + shape_str(logits.shape()) +
                     " vs C=" + std::to_string(cfg.num_classes));
  if (labels.size() != batch)
    throw ContractError("label_smoothed_ce: " + std::to_string(labels.size()) + " labels for " +
                        std::to_string(batch) + " rows");

  auto out = detail::make_op_node({1}, "label_smoothed_ce", {logits.node()});
  const double* pl = logits.values().data();
  // softmax rows retained for the gradient: dlogits = (p - q)/B
  std::vector<double> probs(batch * classes, 0.0);
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const std::vector<double> q = smoothed_targets(labels[b], cfg);
    const double* row = pl + b * classes;
    double mx = row[0];
    for (std::size_t i = 1; i < classes; ++i) mx = std::max(mx, row[i]);
    double denom = 0.0;
    for (std::size_t i = 0; i < classes; ++i) denom += std::exp(row[i] - mx);
    const double lse = mx + std::log(denom);
    double loss = 0.0;
    for (std::size_t i = 0; i < classes; ++i) {
      probs[b * classes + i] = std::exp(row[i] - lse);
      loss += q[i] * (lse - row[i]);
    }
    total += loss;
  }
  const double inv_batch = 1.0 / static_cast<double>(batch);
  out->data[0] = total * inv_batch;

  if (detail::is_recording(out)) {
    TensorNode* o = out.get();
    TensorNode* nl = logits.node().get();
    std::vector<std::uint32_t> lab = labels;
    SmoothingConfig c = cfg;
    out->backprop = [o, nl, probs, lab, c, batch, classes, inv_batch] {
      if (!nl->requires_grad) return;
      const double g = o->grad[0] * inv_batch;
      for (std::size_t b = 0; b < batch; ++b) {
        const std::vector<double> q = smoothed_targets(lab[b], c);
        for (std::size_t i = 0; i < classes; ++i)
          nl->grad[b * classes + i] += g * (probs[b * classes + i] - q[i]);
      }
    };
  }
  return Tensor(out);
}

Tensor label_smoothed_ce(const Tensor& logits, std::uint32_t label, const SmoothingConfig& cfg) {
  return label_smoothed_ce(logits, std::vector<std::uint32_t>{label}, cfg);
}

}  // namespace hbfp
