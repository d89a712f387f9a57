// SPDX-License-Identifier: Apache-2.0
//
// Run configuration and its canonical JSON form.

#pragma once

#include <string>

#include "json.hpp"

#include "mtlab/data.hpp"
#include "mtlab/model.hpp"
#include "mtlab/scheduler.hpp"

namespace mtlab {

/// Configuration problems; the CLI maps these to exit code 1.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainingConfig {
  std::size_t steps = 4000;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-9;
  double warmup_fraction = 0.1;
  std::uint64_t seed = 7;
  std::size_t checkpoint_every = 1000;
  std::size_t log_every = 50;
  std::size_t eval_every = 500;
  std::size_t eval_samples = 256;
};

struct Toggles {
  bool use_asr = true;
  bool use_mt = true;
  bool use_scheduler = true;
  bool use_shrink = true;
  bool use_lbm = true;
  bool use_l2g = true;
  bool use_cl = true;
  bool use_consistency = true;
  double shrink_warmup_fraction = 0.1;
  double text_noise_prob = 0.2;
  AsrVariant asr_variant = AsrVariant::Ctc;
};

struct RunConfig {
  CorpusConfig corpus;
  /// Training runs use dropout 0.1; analysis forwards pass no rng and skip it.
  ModelConfig model{.dropout = 0.1};
  SchedulerConfig scheduler;
  TrainingConfig training;
  Toggles toggles;
  double w_asr = 1.0;
  double w_mt = 1.0;
  double w_cl = 0.3;

  /// Cross-section checks (vocabulary and frame sizes must agree).
  void validate() const;
  /// Sets the training and model seeds.
  void override_seed(std::uint64_t seed);
};

nlohmann::ordered_json to_json(const RunConfig& config);
/// Missing keys keep their defaults; unknown keys raise ConfigError.
RunConfig run_config_from_json(const nlohmann::json& doc);
RunConfig load_run_config(const std::string& path);
/// Indented canonical text of to_json.
std::string dump_config(const RunConfig& config);

}  // namespace mtlab
