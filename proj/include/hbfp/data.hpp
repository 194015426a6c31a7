#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "hbfp/tensor.hpp"

namespace hbfp {

enum class Split : std::uint8_t { Train = 0, Query = 1, Gallery = 2 };

struct Sample {
  Tensor image;  // [C,H,W]
  std::uint32_t identity = 0;
  std::uint32_t camera = 0;
  Split split = Split::Train;
};

struct ImageSpec {
  std::size_t channels = 3, height = 48, width = 16;
};

struct DatasetSpec {
  std::size_t train_ids = 16, test_ids = 8, per_id = 8;
  std::size_t cameras = 4, query_per_id = 2;
  ImageSpec image;
  std::uint64_t seed = 7;
};

// Synthetic identities: each id is a deterministic function of (seed, id) --
// a layered color-block clothing pattern -- with per-sample brightness jitter,
// horizontal shift, additive noise and a camera-dependent tint (cameras
// assigned round robin). per_id must be >= 2 so every id has a positive pair.
std::vector<Sample> generate_synthetic(std::size_t num_ids, std::size_t per_id,
                                       std::uint64_t seed, const ImageSpec& img,
                                       std::size_t cameras = 4, std::uint32_t id_offset = 0);

// Full split generator: disjoint train/test identity ranges; test samples are
// assigned query/gallery so every query id appears in the gallery under a
// different camera.
std::vector<Sample> generate_dataset(const DatasetSpec& spec);

// "HBFPDS1" container; round-trips bitwise.
void save_dataset(const std::string& path, const std::vector<Sample>& samples);
std::vector<Sample> load_dataset(const std::string& path);

struct PKBatch {
  Tensor images;  // [P*K, C, H, W]
  std::vector<std::uint32_t> labels;
};

// Identity-balanced batches: P identities drawn from a per-epoch shuffled
// cycle, K samples per identity without replacement within an epoch.
class PKSampler {
 public:
  PKSampler(const std::vector<Sample>& samples, std::size_t p, std::size_t k,
            Split split = Split::Train);

  PKBatch next(std::mt19937_64& rng);

  const std::vector<std::uint32_t>& identities() const { return ids_; }

 private:
  const std::vector<Sample>* samples_;
  std::size_t p_, k_;
  std::vector<std::uint32_t> ids_;
  std::map<std::uint32_t, std::vector<std::size_t>> by_id_;
  std::vector<std::uint32_t> id_cycle_;
  std::map<std::uint32_t, std::vector<std::size_t>> sample_cycle_;
};

}  // namespace hbfp
