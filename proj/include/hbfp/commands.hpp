#pragma once

#include <optional>
#include <ostream>
#include <string>

#include "hbfp/config.hpp"
#include "hbfp/eval.hpp"

namespace hbfp {

// Subcommand bodies, separated from argv handling so they are testable
// in-process. All of them throw the hbfp error types; the CLI maps those to
// exit codes (1=config, 2=io, 3=contract, 4=numeric).

// Writes <out_dir>/dataset.hbfpds; returns the path.
std::string cmd_gen_data(const RunConfig& cfg, std::ostream& log);

struct TrainOutput {
  std::string checkpoint_path;
  std::string loss_log_path;
  std::size_t steps = 0;
  double final_loss = 0.0;
};

// Trains for epochs * steps_per_epoch optimizer steps (steps_per_epoch
// derived from the dataset when 0) and writes <out_dir>/checkpoint.hbfpck
// plus a per-step loss log. epochs=0 checkpoints the initialization.
TrainOutput cmd_train(const RunConfig& cfg, std::ostream& log);

// Loads cfg.checkpoint_path, rebuilds the model from the embedded config,
// extracts query/gallery embeddings and writes <out_dir>/metrics.tsv.
// lambda_override swaps the pooling schedule at eval time (the --lambdas
// flag); the dataset comes from cfg.dataset_path or, when empty, is
// regenerated from the checkpoint's own data parameters.
RetrievalResult cmd_eval(const RunConfig& cfg, std::ostream& log,
                         const std::optional<std::vector<double>>& lambda_override = {});

// Runs every built-in gradient check plus the micro-model composite and
// writes one line per op. Returns true when every check passes.
bool cmd_gradcheck(const RunConfig& cfg, std::ostream& report, std::size_t seeds = 50);

}  // namespace hbfp
