#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "hbfp/data.hpp"
#include "hbfp/rng.hpp"

using namespace hbfp;

namespace {

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const std::size_t n = a.size();
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double cov = 0, va = 0, vb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    cov += (a[i] - ma) * (b[i] - mb);
    va += (a[i] - ma) * (a[i] - ma);
    vb += (b[i] - mb) * (b[i] - mb);
  }
  return cov / std::sqrt(va * vb);
}

ImageSpec small_image() { return ImageSpec{3, 24, 8}; }

}  // namespace

TEST_CASE("generate_synthetic: contracts, determinism, camera round robin") {
  CHECK_THROWS_AS(generate_synthetic(4, 1, 1, small_image()), ContractError);

  auto a = generate_synthetic(4, 6, 12, small_image());
  auto b = generate_synthetic(4, 6, 12, small_image());
  REQUIRE(a.size() == 24);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].identity == b[i].identity);
    CHECK(a[i].camera == (i % 6) % 4);  // round robin within each identity
    for (std::size_t j = 0; j < a[i].image.numel(); ++j)
      CHECK(a[i].image.at(j) == b[i].image.at(j));
  }
}

TEST_CASE("generate_synthetic: same id shares base pattern, seeds diverge") {
  auto samples = generate_synthetic(6, 4, 5, small_image());
  // two samples of one identity correlate strongly
  double same_id = pearson(samples[0].image.values(), samples[1].image.values());
  CHECK(same_id > 0.5);

  // mean same-id correlation beats mean cross-id correlation
  double same_acc = 0, cross_acc = 0;
  int same_n = 0, cross_n = 0;
  for (std::size_t i = 0; i < samples.size(); i += 2)
    for (std::size_t j = i + 1; j < samples.size(); j += 3) {
      const double c = pearson(samples[i].image.values(), samples[j].image.values());
      if (samples[i].identity == samples[j].identity) {
        same_acc += c;
        ++same_n;
      } else {
        cross_acc += c;
        ++cross_n;
      }
    }
  CHECK(same_acc / same_n > cross_acc / cross_n);

  auto other_seed = generate_synthetic(6, 4, 6, small_image());
  double cross_seed = pearson(samples[0].image.values(), other_seed[0].image.values());
  CHECK(cross_seed < 0.9);
}

TEST_CASE("generate_dataset: disjoint splits and cross-camera positives") {
  DatasetSpec spec;
  spec.image = small_image();
  spec.train_ids = 6;
  spec.test_ids = 4;
  auto data = generate_dataset(spec);
  REQUIRE(data.size() == 10 * spec.per_id);

  std::set<std::uint32_t> train_ids, test_ids;
  for (const auto& s : data) {
    if (s.split == Split::Train)
      train_ids.insert(s.identity);
    else
      test_ids.insert(s.identity);
  }
  for (std::uint32_t id : train_ids) CHECK(test_ids.count(id) == 0);
  CHECK(train_ids.size() == 6);
  CHECK(test_ids.size() == 4);

  // every query id appears in the gallery under a different camera; query ids
  // are a subset of gallery ids
  for (const auto& q : data) {
    if (q.split != Split::Query) continue;
    bool has_cross_camera = false;
    for (const auto& g : data) {
      if (g.split != Split::Gallery || g.identity != q.identity) continue;
      if (g.camera != q.camera) has_cross_camera = true;
    }
    CHECK(has_cross_camera);
  }
}

TEST_CASE("dataset file: bitwise round trip") {
  DatasetSpec spec;
  spec.image = small_image();
  spec.train_ids = 3;
  spec.test_ids = 2;
  auto data = generate_dataset(spec);

  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "hbfp_data_test";
  fs::create_directories(dir);
  const std::string path1 = (dir / "round1.hbfpds").string();
  const std::string path2 = (dir / "round2.hbfpds").string();

  save_dataset(path1, data);
  auto loaded = load_dataset(path1);
  REQUIRE(loaded.size() == data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    CHECK(loaded[i].identity == data[i].identity);
    CHECK(loaded[i].camera == data[i].camera);
    CHECK(loaded[i].split == data[i].split);
    REQUIRE(loaded[i].image.shape() == data[i].image.shape());
    for (std::size_t j = 0; j < data[i].image.numel(); ++j)
      CHECK(loaded[i].image.at(j) == data[i].image.at(j));
  }
  save_dataset(path2, loaded);
  std::ifstream f1(path1, std::ios::binary), f2(path2, std::ios::binary);
  std::string bytes1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string bytes2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(bytes1 == bytes2);

  CHECK_THROWS_AS(load_dataset((dir / "missing.hbfpds").string()), IoError);
  const std::string bad = (dir / "bad.hbfpds").string();
  std::ofstream(bad, std::ios::binary) << "NOTMAGIC00";
  CHECK_THROWS_AS(load_dataset(bad), IoError);
  fs::remove_all(dir);
}

TEST_CASE("pk_sampler: batch structure, determinism, contracts") {
  DatasetSpec spec;
  spec.image = small_image();
  auto data = generate_dataset(spec);

  PKSampler sampler(data, 4, 3);
  auto rng = substream(9, "sampler");
  PKBatch batch = sampler.next(rng);
  REQUIRE(batch.labels.size() == 12);
  CHECK(batch.images.shape() == Shape{12, 3, 24, 8});
  std::map<std::uint32_t, int> counts;
  for (auto l : batch.labels) ++counts[l];
  CHECK(counts.size() == 4);
  for (const auto& [id, c] : counts) CHECK(c == 3);

  PKSampler s1(data, 4, 3), s2(data, 4, 3);
  auto r1 = substream(10, "det"), r2 = substream(10, "det");
  for (int step = 0; step < 5; ++step) {
    PKBatch b1 = s1.next(r1), b2 = s2.next(r2);
    CHECK(b1.labels == b2.labels);
    for (std::size_t i = 0; i < b1.images.numel(); ++i)
      CHECK(b1.images.at(i) == b2.images.at(i));
  }

  CHECK_THROWS_AS(PKSampler(data, 17, 2), ContractError);  // only 16 train ids
  CHECK_THROWS_AS(PKSampler(data, 4, 9), ContractError);   // only 8 per id
}

TEST_CASE("pk_sampler: identity selection uniform within 3 sigma") {
  DatasetSpec spec;
  spec.image = small_image();
  auto data = generate_dataset(spec);
  PKSampler sampler(data, 4, 2);
  auto rng = substream(11, "uniform");

  const int batches = 400;
  std::map<std::uint32_t, int> counts;
  for (int i = 0; i < batches; ++i) {
    PKBatch b = sampler.next(rng);
    std::set<std::uint32_t> in_batch(b.labels.begin(), b.labels.end());
    for (auto id : in_batch) ++counts[id];
  }
  const double p = 4.0 / 16.0;
  const double expected = batches * p;
  const double sigma = std::sqrt(batches * p * (1 - p));
  for (const auto& [id, c] : counts) CHECK(std::fabs(c - expected) <= 3.0 * sigma);
}

TEST_CASE("dataset is identity-separable for a nearest-centroid classifier on raw pixels") {
  DatasetSpec spec;
  spec.image = small_image();
  auto data = generate_dataset(spec);

  std::map<std::uint32_t, std::vector<const Sample*>> train_by_id;
  for (const auto& s : data)
    if (s.split == Split::Train) train_by_id[s.identity].push_back(&s);

  std::map<std::uint32_t, std::vector<double>> centroids;
  for (const auto& [id, list] : train_by_id) {
    std::vector<double> c(list[0]->image.numel(), 0.0);
    const std::size_t half = list.size() / 2;
    for (std::size_t i = 0; i < half; ++i)
      for (std::size_t j = 0; j < c.size(); ++j) c[j] += list[i]->image.at(j);
    for (double& v : c) v /= static_cast<double>(half);
    centroids[id] = std::move(c);
  }

  int correct = 0, total = 0;
  for (const auto& [id, list] : train_by_id) {
    for (std::size_t i = list.size() / 2; i < list.size(); ++i) {
      double best = 1e300;
      std::uint32_t best_id = 0;
      for (const auto& [cid, c] : centroids) {
        double d = 0.0;
        for (std::size_t j = 0; j < c.size(); ++j) {
          const double diff = list[i]->image.at(j) - c[j];
          d += diff * diff;
        }
        if (d < best) {
          best = d;
          best_id = cid;
        }
      }
      correct += best_id == id;
      ++total;
    }
  }
  const double accuracy = static_cast<double>(correct) / total;
  CHECK(accuracy > 2.0 / 16.0);  // comfortably above chance
  CHECK(accuracy > 0.5);
}
