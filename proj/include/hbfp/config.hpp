#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hbfp/errors.hpp"

namespace hbfp {

// Every hyperparameter of the pipeline. Desk-scale defaults; the paper-scale
// operating point (documented for reference) is channels (1024,1024,2048) at
// 24x8 cells, projections L=512 / L'=2048, input 384x128.
struct RunConfig {
  std::uint64_t seed = 7;

  // synthetic data
  std::size_t image_channels = 3, image_height = 48, image_width = 16;
  std::size_t train_ids = 16, test_ids = 8, per_id = 8;
  std::size_t cameras = 4, query_per_id = 2;
  std::string dataset_path;  // empty: synthesize in memory from the seed

  // backbone and augmentation
  std::size_t d1 = 16, d2 = 16, d3 = 32;
  std::size_t block_depth = 1;
  std::size_t proj_l = 32, proj_l_prime = 64;
  bool bfp_enabled = true;
  bool share_reentry = true;

  // pooling
  std::vector<double> lambdas = {0.0, 0.3, 0.5, 0.7, 1.0};

  // losses
  double margin = 0.3;
  double epsilon = 0.3;
  std::size_t p_ids = 16, k_per_id = 4;

  // optimizer
  double lr = 2e-4;
  double weight_decay = 5e-4;
  std::size_t epochs = 100;
  std::size_t steps_per_epoch = 0;  // 0: derived as train samples / (P*K)

  // evaluation
  std::vector<std::size_t> eval_ranks = {1, 5, 10};
  std::size_t workers = 1;

  // paths
  std::string out_dir = "out";
  std::string checkpoint_path;
};

// Plain-text key=value lines; '#' starts a comment; unknown keys are errors.
RunConfig parse_config_text(const std::string& text);
RunConfig parse_config_file(const std::string& path);

// Applies one key=value assignment (used for flag overrides too).
void apply_config_entry(RunConfig& cfg, const std::string& key, const std::string& value);

// Full validation of every field against its invariants.
void validate_config(const RunConfig& cfg);

// Canonical serialization; parse_config_text(config_to_text(c)) == c.
std::string config_to_text(const RunConfig& cfg);

}  // namespace hbfp
