#include "hbfp/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "hbfp/rng.hpp"
#include "hbfp/serialize.hpp"

namespace hbfp {

namespace {

constexpr const char* kDatasetMagic = "HBFPDS1";

// Layered clothing pattern: head / split torso / legs / shoes bands with
// per-identity colors.
std::vector<double> base_pattern(std::uint64_t seed, std::uint32_t id, const ImageSpec& img) {
  auto rng = substream(seed, "identity", id);
  std::uniform_real_distribution<double> color(0.05, 0.95);
  double head[3], torso_l[3], torso_r[3], legs[3], shoes[3];
  for (int c = 0; c < 3; ++c) {
    head[c] = color(rng);
    torso_l[c] = color(rng);
    torso_r[c] = color(rng);
    legs[c] = color(rng);
    shoes[c] = color(rng);
  }
  std::vector<double> base(img.channels * img.height * img.width);
  for (std::size_t c = 0; c < img.channels; ++c) {
    const double* band_color[4] = {head, torso_l, legs, shoes};
    for (std::size_t h = 0; h < img.height; ++h) {
      const double frac = static_cast<double>(h) / static_cast<double>(img.height);
      int band = frac < 0.15 ? 0 : frac < 0.55 ? 1 : frac < 0.9 ? 2 : 3;
      for (std::size_t w = 0; w < img.width; ++w) {
        double v = band_color[band][c % 3];
        if (band == 1 && w >= img.width / 2) v = torso_r[c % 3];
        base[(c * img.height + h) * img.width + w] = v;
      }
    }
  }
  return base;
}

}  // namespace

std::vector<Sample> generate_synthetic(std::size_t num_ids, std::size_t per_id,
                                       std::uint64_t seed, const ImageSpec& img,
                                       std::size_t cameras, std::uint32_t id_offset) {
  if (per_id < 2)
    throw ContractError("generate_synthetic: per_id must be >= 2 so every id has a positive pair");
  if (cameras == 0) throw ContractError("generate_synthetic: need at least one camera");

  // fixed per-camera channel tint, shared by every sample of that camera
  std::vector<double> tint(cameras * img.channels);
  for (std::size_t cam = 0; cam < cameras; ++cam) {
    auto rng = substream(seed, "camera", cam);
    std::uniform_real_distribution<double> t(0.8, 1.2);
    for (std::size_t c = 0; c < img.channels; ++c) tint[cam * img.channels + c] = t(rng);
  }

  std::vector<Sample> out;
  out.reserve(num_ids * per_id);
  for (std::uint32_t rel = 0; rel < num_ids; ++rel) {
    const std::uint32_t id = id_offset + rel;
    const std::vector<double> base = base_pattern(seed, id, img);
    for (std::size_t k = 0; k < per_id; ++k) {
      auto rng = substream(seed, "sample", id, k);
      std::uniform_real_distribution<double> bright(0.85, 1.15);
      std::uniform_int_distribution<int> shift_dist(-2, 2);
      std::normal_distribution<double> noise(0.0, 0.03);
      const double b = bright(rng);
      const int shift = shift_dist(rng);
      const std::size_t cam = k % cameras;

      Sample s;
      s.identity = id;
      s.camera = static_cast<std::uint32_t>(cam);
      s.image = Tensor::zeros({img.channels, img.height, img.width});
      for (std::size_t c = 0; c < img.channels; ++c) {
        const double t = tint[cam * img.channels + c];
        for (std::size_t h = 0; h < img.height; ++h)
          for (std::size_t w = 0; w < img.width; ++w) {
            const int src = std::clamp(static_cast<int>(w) - shift, 0,
                                       static_cast<int>(img.width) - 1);
            const double v = base[(c * img.height + h) * img.width + src];
            s.image.at((c * img.height + h) * img.width + w) = v * b * t + noise(rng);
          }
      }
      out.push_back(std::move(s));
    }
  }
  return out;
}

std::vector<Sample> generate_dataset(const DatasetSpec& spec) {
  if (spec.query_per_id == 0 || spec.query_per_id >= spec.per_id)
    throw ContractError("generate_dataset: query_per_id must lie in [1, per_id)");
  if (spec.per_id < spec.cameras + spec.query_per_id)
    throw ContractError(
        "generate_dataset: per_id too small to cover every camera in the gallery; need >= "
        "cameras + query_per_id");

  std::vector<Sample> out =
      generate_synthetic(spec.train_ids, spec.per_id, spec.seed, spec.image, spec.cameras, 0);
  std::vector<Sample> test =
      generate_synthetic(spec.test_ids, spec.per_id, spec.seed, spec.image, spec.cameras,
                         static_cast<std::uint32_t>(spec.train_ids));
  // Per test id, sample k is on camera k % cameras: the first query_per_id
  // samples become queries, the rest gallery. The gallery then still covers
  // every camera at least once, so each query has a cross-camera positive.
  for (std::size_t i = 0; i < test.size(); ++i) {
    const std::size_t k = i % spec.per_id;
    test[i].split = k < spec.query_per_id ? Split::Query : Split::Gallery;
  }
  out.insert(out.end(), std::make_move_iterator(test.begin()), std::make_move_iterator(test.end()));
  return out;
}

void save_dataset(const std::string& path, const std::vector<Sample>& samples) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("save_dataset: cannot open '" + path + "'");
  io::write_magic(os, kDatasetMagic);
  io::write_u64(os, samples.size());
  for (const Sample& s : samples) {
    io::write_u32(os, s.identity);
    io::write_u32(os, s.camera);
    io::write_u8(os, static_cast<std::uint8_t>(s.split));
    io::write_u32(os, static_cast<std::uint32_t>(s.image.rank()));
    for (std::size_t d = 0; d < s.image.rank(); ++d)
      io::write_u32(os, static_cast<std::uint32_t>(s.image.dim(d)));
    for (double v : s.image.values()) io::write_f64(os, v);
  }
  if (!os) throw IoError("save_dataset: write failed for '" + path + "'");
}

std::vector<Sample> load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("load_dataset: cannot open '" + path + "'");
  io::expect_magic(is, kDatasetMagic, "load_dataset");
  const std::uint64_t count = io::read_u64(is);
  std::vector<Sample> out;
  out.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    Sample s;
    s.identity = io::read_u32(is);
    s.camera = io::read_u32(is);
    const std::uint8_t split = io::read_u8(is);
    if (split > 2) throw IoError("load_dataset: invalid split tag");
    s.split = static_cast<Split>(split);
    const std::uint32_t rank = io::read_u32(is);
    Shape dims(rank);
    for (auto& d : dims) d = io::read_u32(is);
    std::size_t numel = 1;
    for (auto d : dims) numel *= d;
    std::vector<double> values(numel);
    for (double& v : values) v = io::read_f64(is);
    s.image = Tensor::from_data(std::move(dims), std::move(values));
    out.push_back(std::move(s));
  }
  return out;
}

PKSampler::PKSampler(const std::vector<Sample>& samples, std::size_t p, std::size_t k, Split split)
    : samples_(&samples), p_(p), k_(k) {
  if (p == 0 || k == 0) throw ContractError("pk_sampler: P and K must be positive");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].split == split) by_id_[samples[i].identity].push_back(i);
  }
  for (const auto& [id, list] : by_id_) {
    if (list.size() >= k) ids_.push_back(id);
  }
  if (ids_.size() < p)
    throw ContractError("pk_sampler: only " + std::to_string(ids_.size()) + " identities with >= " +
                        std::to_string(k) + " samples, need P = " + std::to_string(p));
}

PKBatch PKSampler::next(std::mt19937_64& rng) {
  std::vector<std::uint32_t> chosen;
  chosen.reserve(p_);
  while (chosen.size() < p_) {
    if (id_cycle_.empty()) {
      id_cycle_ = ids_;
      std::shuffle(id_cycle_.begin(), id_cycle_.end(), rng);
    }
    const std::uint32_t id = id_cycle_.back();
    id_cycle_.pop_back();
    // an epoch boundary inside a batch must not duplicate an identity
    if (std::find(chosen.begin(), chosen.end(), id) == chosen.end()) chosen.push_back(id);
  }

  std::vector<std::size_t> rows;
  rows.reserve(p_ * k_);
  for (std::uint32_t id : chosen) {
    std::vector<std::size_t> picked;
    while (picked.size() < k_) {
      auto& cycle = sample_cycle_[id];
      if (cycle.empty()) {
        cycle = by_id_.at(id);
        std::shuffle(cycle.begin(), cycle.end(), rng);
      }
      const std::size_t row = cycle.back();
      cycle.pop_back();
      if (std::find(picked.begin(), picked.end(), row) == picked.end()) picked.push_back(row);
    }
    rows.insert(rows.end(), picked.begin(), picked.end());
  }

  const Sample& first = (*samples_)[rows[0]];
  const Shape img = first.image.shape();
  PKBatch batch;
  batch.images = Tensor::zeros({rows.size(), img[0], img[1], img[2]});
  batch.labels.reserve(rows.size());
  const std::size_t stride = first.image.numel();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const Sample& s = (*samples_)[rows[r]];
    std::copy(s.image.values().begin(), s.image.values().end(),
              batch.images.values().begin() + r * stride);
    batch.labels.push_back(s.identity);
  }
  return batch;
}

}  // namespace hbfp
