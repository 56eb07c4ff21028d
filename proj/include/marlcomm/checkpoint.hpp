#pragma once

#include "marlcomm/training.hpp"

#include <string>

namespace marlcomm {

// ---------------------------------------------------------------------------
// Checkpoints are a single binary file:
//
//   magic "MARLCKPT", format version, then a checksummed payload holding the
//   resolved config (canonical JSON + its hash), the episode counter, the
//   optimizer scalars, and every parameter and optimizer moment as named
//   tensors with raw little-endian doubles.
//
// Raw doubles make the round trip bit-exact: a reloaded policy reproduces
// the saved one's outputs to the last ulp, which the determinism guarantees
// lean on. Loading rebuilds the policy from the stored config and then
// overwrites its tensors, so name or shape drift is detected loudly.
// ---------------------------------------------------------------------------

struct Checkpoint {
  TrainConfig config;  // resolved
  TrainResult state;   // policy + optimizer + episode counter; metrics empty
};

void save_checkpoint(const std::string& path, const TrainConfig& config,
                     const TrainResult& state);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace marlcomm
