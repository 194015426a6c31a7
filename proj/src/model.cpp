#include "hbfp/model.hpp"

#include <cmath>

#include "hbfp/rng.hpp"

namespace hbfp {

ConvBlock::ConvBlock(ParamRegistry& reg, const std::string& prefix, std::size_t in_ch,
                     std::size_t out_ch, std::size_t depth, std::size_t stride,
                     std::mt19937_64& rng) {
  if (depth == 0) throw ContractError("conv block depth must be positive");
  convs_.reserve(depth);
  convs_.emplace_back(reg, prefix + ".conv0", in_ch, out_ch, 3, stride, 1, rng);
  for (std::size_t i = 1; i < depth; ++i)
    convs_.emplace_back(reg, prefix + ".conv" + std::to_string(i), out_ch, out_ch, 3, 1, 1, rng);
}

Tensor ConvBlock::forward(const Tensor& x) const {
  Tensor h = x;
  for (const auto& conv : convs_) h = relu(conv.forward(h));
  return h;
}

HbfpModel::HbfpModel(const RunConfig& cfg)
    : cfg_(cfg),
      feat_h_(cfg.image_height / 4),
      feat_w_(cfg.image_width / 4),
      classes_(cfg.train_ids),
      bfp_enabled_(cfg.bfp_enabled),
      init_rng_(substream(cfg.seed, "init")),
      block1_(reg_, "backbone.block1", cfg.image_channels, cfg.d1, cfg.block_depth, 2, init_rng_),
      block2_(reg_, "backbone.block2", cfg.d1, cfg.d1, cfg.block_depth, 2, init_rng_),
      block3_(reg_, "backbone.block3", cfg.d1, cfg.d2, cfg.block_depth, 1, init_rng_),
      block4_(reg_, "backbone.block4", cfg.d2, cfg.d3, cfg.block_depth, 1, init_rng_),
      bfp_low_mid_(reg_, "bfp.low_mid", cfg.d1, cfg.d2, cfg.proj_l, cfg.proj_l_prime, init_rng_),
      bfp_mid_high_(reg_, "bfp.mid_high", cfg.d2, cfg.d3, cfg.proj_l, cfg.proj_l_prime,
                    init_rng_),
      head_bn_low_(reg_, "head.low.bn", cfg.d1),
      head_bn_mid_(reg_, "head.mid.bn", cfg.d2),
      head_bn_fused_(reg_, "head.fused.bn", cfg.d3),
      head_low_(reg_, "head.low.fc", cfg.d1, classes_, init_rng_),
      head_mid_(reg_, "head.mid.fc", cfg.d2, classes_, init_rng_),
      head_fused_(reg_, "head.fused.fc", cfg.d3, classes_, init_rng_) {
  gp_.lambdas = cfg.lambdas;
  if (!cfg.share_reentry) {
    block3_reentry_.emplace(reg_, "backbone.block3_reentry", cfg.d1, cfg.d2, cfg.block_depth, 1,
                            init_rng_);
    block4_reentry_.emplace(reg_, "backbone.block4_reentry", cfg.d2, cfg.d3, cfg.block_depth, 1,
                            init_rng_);
  }
  // re-entry shape closure: the augmented low map must carry d1 channels so
  // block3 can consume it again
  if (bfp_low_mid_.p_x.dim(1) != cfg.d1 || bfp_low_mid_.p_y.dim(1) != cfg.d2 ||
      bfp_mid_high_.p_x.dim(1) != cfg.d2 || bfp_mid_high_.p_y.dim(1) != cfg.d3)
    throw ContractError("model: augmented-map channel counts do not close the re-entry loop");
}

std::size_t HbfpModel::descriptor_dim() const { return cfg_.d1 + cfg_.d2 + cfg_.d3; }

void HbfpModel::set_lambdas(const std::vector<double>& lambdas) {
  if (lambdas.empty()) throw ContractError("set_lambdas: threshold list must be non-empty");
  for (double l : lambdas) {
    if (!(l >= 0.0 && l <= 1.0))
      throw ContractError("set_lambdas: lambda " + std::to_string(l) + " outside [0,1]");
  }
  gp_.lambdas = lambdas;
}

LevelFeatures HbfpModel::backbone_forward(const Tensor& images) const {
  if (images.rank() != 4 || images.dim(1) != cfg_.image_channels ||
      images.dim(2) != cfg_.image_height || images.dim(3) != cfg_.image_width)
    throw ShapeError("backbone: expected [B," + std::to_string(cfg_.image_channels) + "," +
                     std::to_string(cfg_.image_height) + "," + std::to_string(cfg_.image_width) +
                     "], got " + shape_str(images.shape()));
  LevelFeatures lv;
  lv.batch = images.dim(0);
  lv.height = feat_h_;
  lv.width = feat_w_;
  Tensor stem = block1_.forward(images);
  lv.low = block2_.forward(stem);
  lv.mid = block3_.forward(lv.low);
  lv.high = block4_.forward(lv.mid);
  return lv;
}

ModelOutputs HbfpModel::forward(const Tensor& images, bool training) {
  ModelOutputs out;
  out.levels = backbone_forward(images);
  const std::size_t b = out.levels.batch;

  Tensor low_rows, mid_rows, fused_rows;
  if (bfp_enabled_) {
    // low <-> mid pairing
    Tensor xs = flatten_cells(self_awareness(out.levels.low, bfp_low_mid_.mask_a));
    Tensor ys = flatten_cells(self_awareness(out.levels.mid, bfp_low_mid_.mask_b));
    BfpBatchOutput low_mid = bfp_apply(xs, ys, b, bfp_low_mid_, training);
    // mid <-> high pairing with its own masks
    Tensor ms = flatten_cells(self_awareness(out.levels.mid, bfp_mid_high_.mask_a));
    Tensor zs = flatten_cells(self_awareness(out.levels.high, bfp_mid_high_.mask_b));
    BfpBatchOutput mid_high = bfp_apply(ms, zs, b, bfp_mid_high_, training);

    low_rows = low_mid.x_aug_rows;
    // both mid-level augmentations sum into one augmented mid map
    mid_rows = add(low_mid.y_aug_rows, mid_high.x_aug_rows);
    Tensor high_rows = mid_high.y_aug_rows;

    Tensor aug_low = unflatten_cells(low_rows, b, cfg_.d1, feat_h_, feat_w_);
    Tensor aug_mid = unflatten_cells(mid_rows, b, cfg_.d2, feat_h_, feat_w_);
    Tensor aug_high = unflatten_cells(high_rows, b, cfg_.d3, feat_h_, feat_w_);

    // re-entry: push the augmented low/mid maps through the later blocks
    const ConvBlock& b3 = block3_reentry_ ? *block3_reentry_ : block3_;
    const ConvBlock& b4 = block4_reentry_ ? *block4_reentry_ : block4_;
    Tensor integrated = b4.forward(add(b3.forward(aug_low), aug_mid));
    fused_rows = flatten_cells(add(integrated, aug_high));
  } else {
    // bypass: the plain multi-level baseline
    low_rows = flatten_cells(out.levels.low);
    mid_rows = flatten_cells(out.levels.mid);
    fused_rows = flatten_cells(out.levels.high);
  }

  out.desc_low = multi_lambda_descriptor_batch(low_rows, b, gp_);
  out.desc_mid = multi_lambda_descriptor_batch(mid_rows, b, gp_);
  out.desc_fused = multi_lambda_descriptor_batch(fused_rows, b, gp_);
  out.logits_low = head_low_.forward(head_bn_low_.forward(out.desc_low, training));
  out.logits_mid = head_mid_.forward(head_bn_mid_.forward(out.desc_mid, training));
  out.logits_fused = head_fused_.forward(head_bn_fused_.forward(out.desc_fused, training));
  return out;
}

Tensor final_descriptor(const Tensor& desc_low, const Tensor& desc_mid,
                        const Tensor& desc_fused) {
  if (desc_low.rank() != 2 || desc_mid.rank() != 2 || desc_fused.rank() != 2 ||
      desc_low.dim(0) != desc_mid.dim(0) || desc_low.dim(0) != desc_fused.dim(0))
    throw ContractError("final_descriptor: batch mismatch between descriptors");
  // concat along features = transpose of a row concat
  return transpose(concat_rows({transpose(desc_low), transpose(desc_mid),
                                transpose(desc_fused)}));
}

Tensor final_descriptor(const ModelOutputs& out) {
  return final_descriptor(out.desc_low, out.desc_mid, out.desc_fused);
}

Adam::Adam(double lr, double weight_decay, double beta1, double beta2, double eps)
    : lr_(lr), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::step(const std::vector<std::pair<std::string, Tensor>>& params) {
  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(params[i].second.numel(), 0.0);
      v_[i].assign(params[i].second.numel(), 0.0);
    }
  }
  if (m_.size() != params.size())
    throw ContractError("adam: parameter list changed between steps");
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& p = params[i].second;
    const std::vector<double>& grad = p.grad();
    std::vector<double>& data = const_cast<Tensor&>(p).values();
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double g = grad[j] + wd_ * data[j];
      m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g;
      v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g * g;
      const double mhat = m_[i][j] / bc1;
      const double vhat = v_[i][j] / bc2;
      data[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

StepLosses train_step(HbfpModel& model, Adam& opt, const PKBatch& batch, const RunConfig& cfg) {
  ModelOutputs out = model.forward(batch.images, /*training=*/true);

  TripletConfig tri{cfg.margin, cfg.p_ids, cfg.k_per_id};
  SmoothingConfig smooth{cfg.epsilon, model.num_classes()};

  Tensor loss_low = add(batch_hard_triplet(out.desc_low, batch.labels, tri),
                        label_smoothed_ce(out.logits_low, batch.labels, smooth));
  Tensor loss_mid = add(batch_hard_triplet(out.desc_mid, batch.labels, tri),
                        label_smoothed_ce(out.logits_mid, batch.labels, smooth));
  Tensor loss_fused = add(batch_hard_triplet(out.desc_fused, batch.labels, tri),
                          label_smoothed_ce(out.logits_fused, batch.labels, smooth));
  Tensor total = add(add(loss_low, loss_mid), loss_fused);

  if (!total.all_finite() || !std::isfinite(total.at(0))) {
    const std::string where = first_nonfinite(total);
    throw NumericError("train_step: non-finite loss; first non-finite value in " +
                       (where.empty() ? std::string("the loss itself") : where));
  }

  backward(total);
  opt.step(model.registry().params());
  model.registry().zero_grad();

  StepLosses losses;
  losses.total = total.at(0);
  losses.low = loss_low.at(0);
  losses.mid = loss_mid.at(0);
  losses.fused = loss_fused.at(0);
  return losses;
}

RunConfig micro_config(std::uint64_t seed) {
  RunConfig cfg;
  cfg.seed = seed;
  cfg.image_channels = 3;
  cfg.image_height = 8;
  cfg.image_width = 8;
  cfg.d1 = 2;
  cfg.d2 = 2;
  cfg.d3 = 3;
  cfg.proj_l = 2;
  cfg.proj_l_prime = 3;
  cfg.train_ids = 2;
  return cfg;
}

double model_composite_gradcheck(const RunConfig& cfg, std::uint64_t seed, double eps,
                                 double kink_margin) {
  for (std::uint64_t attempt = 0; attempt < 64; ++attempt) {
    RunConfig local = cfg;
    local.seed = hash_stream(seed, "composite-model", attempt);
    HbfpModel model(local);
    auto rng = substream(local.seed, "composite-input");
    Tensor images = Tensor::randn({2, cfg.image_channels, cfg.image_height, cfg.image_width},
                                  rng, 1.0, true);
    Tensor w_low = Tensor::randn({2, cfg.d1}, rng);
    Tensor w_mid = Tensor::randn({2, cfg.d2}, rng);
    Tensor w_fused = Tensor::randn({2, cfg.d3}, rng);
    Tensor w_l0 = Tensor::randn({2, model.num_classes()}, rng);
    Tensor w_l1 = Tensor::randn({2, model.num_classes()}, rng);
    Tensor w_l2 = Tensor::randn({2, model.num_classes()}, rng);

    auto readout = [&]() {
      ModelOutputs out = model.forward(images, /*training=*/true);
      Tensor acc = add(add(sum(hadamard(out.desc_low, w_low)), sum(hadamard(out.desc_mid, w_mid))),
                       sum(hadamard(out.desc_fused, w_fused)));
      Tensor logit_acc = add(add(sum(hadamard(out.logits_low, w_l0)),
                                 sum(hadamard(out.logits_mid, w_l1))),
                             sum(hadamard(out.logits_fused, w_l2)));
      return add(acc, logit_acc);
    };

    // kink-avoiding sampling: probe the selector margins first
    KinkMeter meter;
    {
      KinkScope scope(meter);
      NoGradGuard no_grad;
      (void)readout();
    }
    if (meter.min_margin < kink_margin) continue;

    model.registry().zero_grad();
    images.zero_grad();
    backward(readout());

    // every parameter plus the input images, finite-differenced coordinate-wise
    std::vector<Tensor> leaves;
    for (auto& [name, t] : model.registry().params()) leaves.push_back(t);
    leaves.push_back(images);

    double worst = 0.0;
    NoGradGuard no_grad;
    for (Tensor& leaf : leaves) {
      const std::vector<double> g = leaf.grad();
      for (std::size_t j = 0; j < leaf.numel(); ++j) {
        const double saved = leaf.at(j);
        leaf.at(j) = saved + eps;
        const double up = readout().at(0);
        leaf.at(j) = saved - eps;
        const double down = readout().at(0);
        leaf.at(j) = saved;
        const double fd = (up - down) / (2.0 * eps);
        const double denom = std::max({std::fabs(g[j]), std::fabs(fd), 1e-8});
        worst = std::max(worst, std::fabs(g[j] - fd) / denom);
      }
    }
    return worst;
  }
  throw ContractError("model_composite_gradcheck: no kink-free sample after 64 attempts");
}

}  // namespace hbfp
