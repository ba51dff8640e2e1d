#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "utrack/nets.hpp"

namespace utrack {

struct CheckpointMeta {
  int version = 1;
  NetConfig net;
  int actor_out_dim = kNumActions;
  long long training_step = 0;  // env steps consumed so far
  long long update_index = 0;
};

/// Writes `manifest.json` + `params.bin` (little-endian float32 tensors at
/// manifest-declared offsets) into `dir`, plus `train_state.bin` (raw
/// float64) when a training-state blob is supplied.
///
/// Saving rounds the in-memory parameters to checkpoint precision, so a run
/// that continues after saving and a run resumed from the file see exactly
/// the same parameter values.
void save_checkpoint(const std::string& dir, TransformerParams& actor,
                     TransformerParams& critic, const CheckpointMeta& meta,
                     const std::vector<double>* train_state = nullptr);

struct LoadedCheckpoint {
  TransformerParams actor;
  TransformerParams critic;
  CheckpointMeta meta;
  std::vector<double> train_state;  // empty when no sidecar was written
};

/// Loads and validates a checkpoint directory. When `expected` is given the
/// architecture dims must match it exactly (DataError otherwise).
LoadedCheckpoint load_checkpoint(const std::string& dir,
                                 const std::optional<NetConfig>& expected = {});

/// FNV-1a 64 over manifest.json + params.bin; an equality witness for
/// determinism checks, not a cryptographic digest.
std::uint64_t checkpoint_hash(const std::string& dir);

}  // namespace utrack
