// SPDX-License-Identifier: Apache-2.0
//
// Versioned binary checkpoints: magic, config JSON, trainer state JSON,
// parameters in registry order, then Adam moments.

#pragma once

#include <string>
#include <vector>

#include "mtlab/config.hpp"
#include "mtlab/model.hpp"
#include "mtlab/scheduler.hpp"

namespace mtlab {

inline constexpr char kCheckpointMagic[] = "MTLABCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct AdamState {
  std::size_t t = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

struct TrainerState {
  std::size_t step = 0;
  std::size_t last_update = 0;
  std::vector<WeightEvent> history;
  std::vector<Task> disabled;
  AdamState adam;
};

struct Checkpoint {
  RunConfig config;
  TrainerState state;
  std::vector<std::string> names;
  std::vector<std::vector<double>> params;
};

void save_checkpoint(const std::string& path, const RunConfig& config, const Model& model, const TrainerState& state);
Checkpoint load_checkpoint(const std::string& path);

/// Fresh model from the checkpoint config with the stored parameter values.
Model restore_model(const Checkpoint& checkpoint);
/// Copies stored values into an existing model; names and sizes must match.
void load_parameters(const Checkpoint& checkpoint, const Model& model);

}  // namespace mtlab
