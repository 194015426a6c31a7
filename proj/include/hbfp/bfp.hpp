#pragma once

#include <utility>
#include <vector>

#include "hbfp/layers.hpp"
#include "hbfp/tensor.hpp"

namespace hbfp {

// The three backbone taps, batched, sharing one spatial grid.
struct LevelFeatures {
  Tensor low, mid, high;  // [B,D1,H,W], [B,D2,H,W], [B,D3,H,W]
  std::size_t batch = 0, height = 0, width = 0;
  std::size_t cells() const { return height * width; }
};

// Column-stochastic maps relating the spatial cells of two levels. raw_x is
// the pre-softmax map; raw_y is its transpose node, so the transpose identity
// between the pre-softmax maps holds exactly by construction.
struct CorrelationPair {
  Tensor c_x, c_y;      // [N,N], columns sum to 1
  Tensor raw_x, raw_y;  // [N,N] pre-softmax scores
};

// Learnables of one cross-level pairing: the rank-L scoring projections
// (u, v, p), the pooling-space projections (u', v'), the output projections
// back to channel space (p_x, p_y), batch norm on every linear-mapping
// output, and a 1x1 self-awareness mask per side.
struct BfpParams {
  BfpParams(ParamRegistry& reg, const std::string& prefix, std::size_t channels_a,
            std::size_t channels_b, std::size_t proj_l, std::size_t proj_l_prime,
            std::mt19937_64& rng);

  std::size_t d_a, d_b, l, l_prime;
  Tensor u, v, p;
  Tensor u_prime, v_prime;
  Tensor p_x, p_y;
  BatchNorm bn_u, bn_v, bn_u_prime, bn_v_prime, bn_p_x, bn_p_y;
  Conv2dLayer mask_a, mask_b;
};

// Eq.-1 style spatial re-weighting: f * sigmoid(conv1x1(f)), mask broadcast
// over channels. Accepts [D,H,W] or [B,D,H,W].
Tensor self_awareness(const Tensor& f, const Conv2dLayer& mask_conv);

// [D,H,W] -> [N,D], rows in row-major (h, then w) cell order; exact inverse.
Tensor flatten_spatial(const Tensor& f);
Tensor unflatten_spatial(const Tensor& rows, std::size_t channels, std::size_t height,
                         std::size_t width);

// Correlation maps of one element: raw[i,j] = p^T (relu(x_i U) . relu(y_j V)),
// computed in matrix form with the all-ones column realizing the p broadcast;
// then column softmax for c_x and, after transposing raw, for c_y.
CorrelationPair correlation_maps(const Tensor& xp, const Tensor& yp, BfpParams& params,
                                 bool training = true);

// Mutual augmentation of one element through the correlation maps in the
// L'-dimensional pooling space; returns (x_aug [N,Da], y_aug [N,Db]).
std::pair<Tensor, Tensor> bfp_transform(const Tensor& xp, const Tensor& yp,
                                        const CorrelationPair& pair, BfpParams& params,
                                        bool training = true);

// Batched path used by the model: projections and their batch norms run over
// the stacked (B*N) rows, correlation and mixing run per element.
struct BfpBatchOutput {
  Tensor x_aug_rows, y_aug_rows;  // [(B*N), Da], [(B*N), Db]
  std::vector<CorrelationPair> pairs;
};
BfpBatchOutput bfp_apply(const Tensor& xp_rows, const Tensor& yp_rows, std::size_t batch,
                         BfpParams& params, bool training);

}  // namespace hbfp
