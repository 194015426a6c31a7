#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "hbfp/checkpoint.hpp"
#include "hbfp/model.hpp"
#include "hbfp/rng.hpp"

using namespace hbfp;

namespace {

// small-but-real operating point to keep the suite fast
RunConfig tiny_config() {
  RunConfig cfg;
  cfg.image_height = 16;
  cfg.image_width = 8;
  cfg.d1 = 4;
  cfg.d2 = 4;
  cfg.d3 = 6;
  cfg.proj_l = 4;
  cfg.proj_l_prime = 6;
  cfg.train_ids = 4;
  cfg.test_ids = 2;
  cfg.per_id = 8;
  cfg.p_ids = 4;
  cfg.k_per_id = 2;
  cfg.lr = 0.01;
  return cfg;
}

Tensor random_images(const RunConfig& cfg, std::size_t batch, std::uint64_t seed) {
  auto rng = substream(seed, "test-model-images");
  return Tensor::randn({batch, cfg.image_channels, cfg.image_height, cfg.image_width}, rng, 0.5);
}

PKBatch make_batch(const RunConfig& cfg, std::uint64_t seed) {
  DatasetSpec spec;
  spec.train_ids = cfg.train_ids;
  spec.test_ids = cfg.test_ids;
  spec.per_id = cfg.per_id;
  spec.cameras = cfg.cameras;
  spec.query_per_id = cfg.query_per_id;
  spec.image = {cfg.image_channels, cfg.image_height, cfg.image_width};
  spec.seed = seed;
  auto data = generate_dataset(spec);
  PKSampler sampler(data, cfg.p_ids, cfg.k_per_id);
  auto rng = substream(seed, "test-model-batch");
  return sampler.next(rng);
}

}  // namespace

TEST_CASE("backbone_forward: level shapes, batch scaling, bitwise replay") {
  RunConfig cfg = tiny_config();
  HbfpModel model(cfg);
  Tensor images = random_images(cfg, 3, 1);
  LevelFeatures lv = model.backbone_forward(images);
  CHECK(lv.low.shape() == Shape{3, 4, 4, 2});
  CHECK(lv.mid.shape() == Shape{3, 4, 4, 2});
  CHECK(lv.high.shape() == Shape{3, 6, 4, 2});
  CHECK(lv.cells() == 8);

  Tensor doubled = random_images(cfg, 6, 1);
  CHECK(model.backbone_forward(doubled).low.shape() == Shape{6, 4, 4, 2});

  // same seed, fresh model: identical weights, identical outputs bitwise
  HbfpModel replay(cfg);
  LevelFeatures lv2 = replay.backbone_forward(images);
  for (std::size_t i = 0; i < lv.high.numel(); ++i) CHECK(lv2.high.at(i) == lv.high.at(i));

  CHECK_THROWS_AS(model.backbone_forward(Tensor::zeros({2, 3, 8, 8})), ShapeError);
}

TEST_CASE("forward: descriptor and logit shapes follow the config") {
  RunConfig cfg = tiny_config();
  HbfpModel model(cfg);
  ModelOutputs out = model.forward(random_images(cfg, 2, 3), true);
  CHECK(out.desc_low.shape() == Shape{2, 4});
  CHECK(out.desc_mid.shape() == Shape{2, 4});
  CHECK(out.desc_fused.shape() == Shape{2, 6});
  CHECK(out.logits_low.shape() == Shape{2, 4});
  CHECK(out.logits_fused.shape() == Shape{2, 4});
  CHECK(model.descriptor_dim() == 14);
}

TEST_CASE("forward: zeroed projections annihilate the low and mid descriptors") {
  RunConfig cfg = tiny_config();
  HbfpModel model(cfg);
  for (auto [name, t] : model.registry().params()) {
    if (name.find(".u") != std::string::npos || name.find(".v") != std::string::npos)
      std::fill(t.values().begin(), t.values().end(), 0.0);
  }
  ModelOutputs out = model.forward(random_images(cfg, 2, 4), true);
  for (std::size_t i = 0; i < out.desc_low.numel(); ++i) CHECK(out.desc_low.at(i) == 0.0);
  for (std::size_t i = 0; i < out.desc_mid.numel(); ++i) CHECK(out.desc_mid.at(i) == 0.0);
}

TEST_CASE("final_descriptor: concatenation in (low, mid, fused) order") {
  RunConfig cfg = tiny_config();
  HbfpModel model(cfg);
  ModelOutputs out = model.forward(random_images(cfg, 2, 5), false);
  Tensor full = final_descriptor(out);
  REQUIRE(full.shape() == Shape{2, 14});
  double norm_sq = 0.0, parts = 0.0;
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t j = 0; j < 4; ++j) CHECK(full.at(b, j) == out.desc_low.at(b, j));
    for (std::size_t j = 0; j < 4; ++j) CHECK(full.at(b, 4 + j) == out.desc_mid.at(b, j));
    for (std::size_t j = 0; j < 6; ++j) CHECK(full.at(b, 8 + j) == out.desc_fused.at(b, j));
  }
  for (std::size_t i = 0; i < full.numel(); ++i) norm_sq += full.at(i) * full.at(i);
  for (const Tensor* t : {&out.desc_low, &out.desc_mid, &out.desc_fused})
    for (std::size_t i = 0; i < t->numel(); ++i) parts += t->at(i) * t->at(i);
  CHECK(norm_sq == doctest::Approx(parts).epsilon(1e-15));

  CHECK_THROWS_AS(final_descriptor(out.desc_low, out.desc_mid, Tensor::zeros({3, 6})),
                  ContractError);
}

TEST_CASE("bypass: descriptors reduce to pooled raw taps") {
  RunConfig cfg = tiny_config();
  HbfpModel model(cfg);
  model.set_bfp_enabled(false);
  Tensor images = random_images(cfg, 2, 6);
  ModelOutputs out = model.forward(images, false);
  GPConfig gp{cfg.lambdas};
  LevelFeatures lv = model.backbone_forward(images);
  Tensor ref = multi_lambda_descriptor_batch(flatten_cells(lv.low), 2, gp);
  for (std::size_t i = 0; i < ref.numel(); ++i) CHECK(out.desc_low.at(i) == ref.at(i));
  Tensor ref_high = multi_lambda_descriptor_batch(flatten_cells(lv.high), 2, gp);
  for (std::size_t i = 0; i < ref_high.numel(); ++i) CHECK(out.desc_fused.at(i) == ref_high.at(i));
}

TEST_CASE("train_step: loss finite and positive at init, zero lr freezes params") {
  RunConfig cfg = tiny_config();
  HbfpModel model(cfg);
  PKBatch batch = make_batch(cfg, 7);

  Adam frozen(0.0, 0.0);
  std::vector<std::vector<double>> before;
  for (auto& [n, t] : model.registry().params()) before.push_back(t.values());
  StepLosses l0 = train_step(model, frozen, batch, cfg);
  CHECK(std::isfinite(l0.total));
  CHECK(l0.total > 0.0);
  std::size_t i = 0;
  for (auto& [n, t] : model.registry().params()) {
    for (std::size_t j = 0; j < t.numel(); ++j) CHECK(t.values()[j] == before[i][j]);
    ++i;
  }
}

TEST_CASE("train_step: 50 repeated steps on one fixed batch drive the loss down") {
  RunConfig cfg = tiny_config();
  HbfpModel model(cfg);
  Adam opt(cfg.lr, cfg.weight_decay);
  PKBatch batch = make_batch(cfg, 8);

  std::vector<double> losses;
  for (int step = 0; step < 50; ++step) losses.push_back(train_step(model, opt, batch, cfg).total);
  CHECK(losses.back() < losses.front());
  CHECK(losses.back() < 0.5 * losses.front());  // overfits decisively, not marginally
}

TEST_CASE("train_step: poisoned parameter aborts with a named diagnostic") {
  RunConfig cfg = tiny_config();
  HbfpModel model(cfg);
  // infinity survives relu and degenerates to NaN inside batch norm
  for (auto [name, t] : model.registry().params()) {
    if (name == "backbone.block3.conv0.weight")
      t.values()[0] = std::numeric_limits<double>::infinity();
  }
  Adam opt(cfg.lr, cfg.weight_decay);
  PKBatch batch = make_batch(cfg, 9);
  CHECK_THROWS_WITH_AS(train_step(model, opt, batch, cfg), doctest::Contains("non-finite"),
                       NumericError);
}

TEST_CASE("determinism: identical config and seed give identical loss trajectories") {
  RunConfig cfg = tiny_config();
  auto run = [&cfg]() {
    HbfpModel model(cfg);
    Adam opt(cfg.lr, cfg.weight_decay);
    DatasetSpec spec;
    spec.train_ids = cfg.train_ids;
    spec.test_ids = cfg.test_ids;
    spec.per_id = cfg.per_id;
    spec.image = {cfg.image_channels, cfg.image_height, cfg.image_width};
    spec.seed = cfg.seed;
    auto data = generate_dataset(spec);
    PKSampler sampler(data, cfg.p_ids, cfg.k_per_id);
    auto rng = substream(cfg.seed, "sampler");
    std::vector<double> losses;
    for (int step = 0; step < 6; ++step)
      losses.push_back(train_step(model, opt, sampler.next(rng), cfg).total);
    return losses;
  };
  auto a = run();
  auto b = run();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("checkpoint: save/load round-trips the forward bitwise") {
  RunConfig cfg = tiny_config();
  HbfpModel model(cfg);
  Adam opt(cfg.lr, cfg.weight_decay);
  PKBatch batch = make_batch(cfg, 10);
  for (int step = 0; step < 3; ++step) train_step(model, opt, batch, cfg);

  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "hbfp_model_test";
  fs::create_directories(dir);
  const std::string path = (dir / "model.hbfpck").string();
  save_checkpoint(path, model.registry(), cfg);

  auto loaded = load_checkpoint(path);
  CHECK(loaded.config.d3 == cfg.d3);
  HbfpModel restored(loaded.config);
  restore_registry(loaded, restored.registry());

  Tensor images = random_images(cfg, 2, 11);
  ModelOutputs a = model.forward(images, false);
  ModelOutputs b = restored.forward(images, false);
  for (std::size_t i = 0; i < a.desc_fused.numel(); ++i)
    CHECK(a.desc_fused.at(i) == b.desc_fused.at(i));
  for (std::size_t i = 0; i < a.logits_low.numel(); ++i)
    CHECK(a.logits_low.at(i) == b.logits_low.at(i));

  // a second save of the restored registry is byte-identical
  const std::string path2 = (dir / "model2.hbfpck").string();
  save_checkpoint(path2, restored.registry(), loaded.config);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string bytes1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string bytes2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(bytes1 == bytes2);
  fs::remove_all(dir);
}

TEST_CASE("independent re-entry weights are a separate parameter set") {
  RunConfig cfg = tiny_config();
  cfg.share_reentry = false;
  HbfpModel model(cfg);
  bool found = false;
  for (auto& [name, t] : model.registry().params())
    if (name.find("block3_reentry") != std::string::npos) found = true;
  CHECK(found);
  ModelOutputs out = model.forward(random_images(cfg, 2, 12), true);
  CHECK(out.desc_fused.all_finite());
}

TEST_CASE("model composite gradcheck on the 2-image micro model") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const double err = model_composite_gradcheck(micro_config(seed), seed);
    INFO("seed=", seed, " err=", err);
    CHECK(err < 1e-3);
  }
}
