// SPDX-License-Identifier: Apache-2.0
//
// Multi-task training loop with task weight scheduling.

#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "mtlab/checkpoint.hpp"
#include "mtlab/config.hpp"
#include "mtlab/losses.hpp"
#include "mtlab/scheduler.hpp"

namespace mtlab {

/// Raised when the total loss turns non-finite; training stops.
class NanAbort : public std::runtime_error {
 public:
  NanAbort(std::size_t step, std::string last_checkpoint)
      : std::runtime_error("non-finite loss at step " + std::to_string(step) + "; last good checkpoint: " +
                           (last_checkpoint.empty() ? std::string("none") : last_checkpoint)),
        step_(step), last_checkpoint_(std::move(last_checkpoint)) {}
  std::size_t step() const { return step_; }
  const std::string& last_checkpoint() const { return last_checkpoint_; }

 private:
  std::size_t step_;
  std::string last_checkpoint_;
};

class Adam {
 public:
  Adam(double beta1, double beta2, double eps) : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  /// One update of every parameter holding a gradient. Tensors without a
  /// gradient keep their moments unchanged.
  void step(const ParamRegistry& registry, double lr);
  const AdamState& state() const { return state_; }
  void set_state(AdamState state) { state_ = std::move(state); }

 private:
  double beta1_, beta2_, eps_;
  AdamState state_;
};

/// Linear warm-up to `base` over `warmup` steps, then base * sqrt(warmup / u).
double learning_rate(double base, std::size_t step, std::size_t warmup);

/// Sample seeds of the training batch at `step` (1-based).
std::vector<std::uint64_t> batch_seeds(const RunConfig& config, std::size_t step);
/// Fixed held-out seeds for greedy accuracy.
std::vector<std::uint64_t> eval_seeds(const RunConfig& config);
/// Single-example probe instances of the scheduling round at `step`.
std::vector<std::uint64_t> probe_seeds(const RunConfig& config, std::size_t step);

/// Forward settings used for training at `step`; `rng` may be null.
ForwardOptions training_options(const RunConfig& config, std::size_t step, std::mt19937_64* rng);

struct AccuracyReport {
  double accuracy = 0.0;
  std::size_t tokens = 0;
};

/// Token accuracy of greedy ST decoding against the references.
AccuracyReport greedy_accuracy(const Model& model, const Corpus& corpus, std::span<const std::uint64_t> seeds,
                               const ForwardOptions& options, std::size_t chunk = 64);
/// Accuracy of emitting the transcription as the translation.
AccuracyReport copy_baseline(const Corpus& corpus, std::span<const std::uint64_t> seeds);

struct TrainOptions {
  std::string out_dir;
  /// Checkpoint to continue from; its config replaces the given one.
  std::string resume_from;
  /// Stop after this step (0 = run to the configured end).
  std::size_t stop_after = 0;
  std::ostream* log = nullptr;
};

struct TrainResult {
  std::size_t last_step = 0;
  std::string last_checkpoint;
  std::optional<AccuracyReport> accuracy;
  AccuracyReport copy_baseline;
  std::optional<double> final_length_ratio;
  std::vector<WeightEvent> history;
  std::vector<Task> pruned;
  std::vector<std::string> warnings;
  double seconds = 0.0;
};

/// Trains into `options.out_dir`: config.json, run.json, metrics.jsonl,
/// timing.jsonl, weights.csv and checkpoints/step_NNNNNN.ckpt.
TrainResult train(RunConfig config, const TrainOptions& options);

/// Checkpoint file name for a step inside a run directory.
std::string checkpoint_path(const std::string& out_dir, std::size_t step);
/// Every checkpoint of a run directory, ordered by step.
std::vector<std::pair<std::size_t, std::string>> list_checkpoints(const std::string& out_dir);

/// CSV with header step,task,m,w.
std::string weights_csv(std::span<const WeightEvent> history);

}  // namespace mtlab
