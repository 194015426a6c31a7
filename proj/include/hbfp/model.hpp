#pragma once

#include <optional>
#include <vector>

#include "hbfp/bfp.hpp"
#include "hbfp/config.hpp"
#include "hbfp/data.hpp"
#include "hbfp/layers.hpp"
#include "hbfp/losses.hpp"
#include "hbfp/pooling.hpp"

namespace hbfp {

// Toy stand-in for a deep backbone: a stack of conv3x3+ReLU blocks where the
// first two carry stride 2, so all three taps share one H/4 x W/4 grid.
class ConvBlock {
 public:
  ConvBlock(ParamRegistry& reg, const std::string& prefix, std::size_t in_ch, std::size_t out_ch,
            std::size_t depth, std::size_t stride, std::mt19937_64& rng);
  Tensor forward(const Tensor& x) const;

 private:
  std::vector<Conv2dLayer> convs_;
};

struct ModelOutputs {
  LevelFeatures levels;                           // raw taps X, Y, Z
  Tensor desc_low, desc_mid, desc_fused;          // [B, d1], [B, d2], [B, d3]
  Tensor logits_low, logits_mid, logits_fused;    // [B, C]
};

// Full wiring: three taps, two cross-level augmentation pairs, re-entry of
// the augmented low/mid maps through the later blocks, fusion with the
// augmented high map, multi-threshold pooled descriptors and one classifier
// head per learned feature. The bypass toggle routes the raw taps straight
// to pooling, giving the plain multi-level baseline.
class HbfpModel {
 public:
  explicit HbfpModel(const RunConfig& cfg);

  LevelFeatures backbone_forward(const Tensor& images) const;
  ModelOutputs forward(const Tensor& images, bool training);

  ParamRegistry& registry() { return reg_; }
  const ParamRegistry& registry() const { return reg_; }

  bool bfp_enabled() const { return bfp_enabled_; }
  void set_bfp_enabled(bool enabled) { bfp_enabled_ = enabled; }

  std::size_t num_classes() const { return classes_; }
  std::size_t feat_height() const { return feat_h_; }
  std::size_t feat_width() const { return feat_w_; }
  std::size_t descriptor_dim() const;

  // Swap the pooling schedule (eval-time lambda ablations).
  void set_lambdas(const std::vector<double>& lambdas);

 private:
  RunConfig cfg_;
  std::size_t feat_h_, feat_w_, classes_;
  bool bfp_enabled_;
  ParamRegistry reg_;
  std::mt19937_64 init_rng_;  // declared before the layers: feeds their initializers in order
  ConvBlock block1_, block2_, block3_, block4_;
  std::optional<ConvBlock> block3_reentry_, block4_reentry_;
  BfpParams bfp_low_mid_, bfp_mid_high_;
  BatchNorm head_bn_low_, head_bn_mid_, head_bn_fused_;
  Linear head_low_, head_mid_, head_fused_;
  GPConfig gp_;
};

// Concatenation (low, mid, fused) of per-feature descriptors. -> [B, d1+d2+d3]
Tensor final_descriptor(const Tensor& desc_low, const Tensor& desc_mid, const Tensor& desc_fused);
Tensor final_descriptor(const ModelOutputs& out);

// First-order adaptive-moment optimizer with decoupled-free (L2-in-gradient)
// weight decay, matching the training recipe.
class Adam {
 public:
  Adam(double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8);
  void step(const std::vector<std::pair<std::string, Tensor>>& params);
  double learning_rate() const { return lr_; }

 private:
  double lr_, wd_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct StepLosses {
  double total = 0.0;
  double low = 0.0, mid = 0.0, fused = 0.0;  // triplet + id loss per feature
};

// One optimizer step on a PK batch: unweighted sum of (triplet + smoothed CE)
// over the three learned features. Throws NumericError naming the first
// non-finite tensor if the loss degenerates.
StepLosses train_step(HbfpModel& model, Adam& opt, const PKBatch& batch, const RunConfig& cfg);

// Central-difference check of the full forward composite: a weighted readout
// of all descriptors and logits, differentiated against every parameter and
// the input images. Resamples (kink-avoiding) while any selector margin falls
// below kink_margin. Returns the max relative error.
double model_composite_gradcheck(const RunConfig& cfg, std::uint64_t seed, double eps = 1e-5,
                                 double kink_margin = 1e-4);

// Micro operating point for composite checks: channels (2,2,3), 2x2 cells.
RunConfig micro_config(std::uint64_t seed);

}  // namespace hbfp
