#pragma once

#include <string>

#include "kvla/config.hpp"
#include "kvla/model.hpp"
#include "kvla/training.hpp"

namespace kvla {

/// Binary container: magic, format version, config fingerprint, the full
/// config text, the epoch counter, length-prefixed named parameter blocks
/// (64-bit values, little-endian), and the optimizer moments. Save followed
/// by load is bitwise identity on every parameter.
void save_checkpoint(const std::string& path, const RunConfig& config,
                     const Model& model, const AdamW& optimizer,
                     std::size_t epoch);

struct LoadedCheckpoint {
  RunConfig config;
  Model model;
  std::size_t epoch = 0;
  std::vector<std::vector<double>> optimizer_m, optimizer_v;
  std::size_t optimizer_steps = 0;
};

/// Rebuilds the model from the embedded config and overwrites its parameters
/// with the stored blocks. When expected_config is non-null its fingerprint
/// must match the stored one unless allow_mismatch is set.
LoadedCheckpoint load_checkpoint(const std::string& path,
                                 const RunConfig* expected_config = nullptr,
                                 bool allow_mismatch = false);

}  // namespace kvla
