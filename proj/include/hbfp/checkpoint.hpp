#pragma once

#include <map>
#include <string>

#include "hbfp/config.hpp"
#include "hbfp/layers.hpp"
#include "hbfp/tensor.hpp"

namespace hbfp {

// "HBFPCK1" container: format version, config snapshot, then a named-tensor
// table (name, rank, dims, little-endian 64-bit values). Bitwise round trip.
void save_checkpoint(const std::string& path, const ParamRegistry& registry,
                     const RunConfig& cfg);

struct LoadedCheckpoint {
  RunConfig config;
  std::map<std::string, Tensor> tensors;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

// Copies loaded tensors into the registry by name; a missing name or shape
// mismatch is a contract violation.
void restore_registry(const LoadedCheckpoint& ck, ParamRegistry& registry);

}  // namespace hbfp
