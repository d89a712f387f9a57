// SPDX-License-Identifier: Apache-2.0
//
// Auxiliary task weighting: impact measurement, multiplicative decay and
// pruning. Model-agnostic; the probe that measures impacts is injected.

#pragma once

#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mtlab/model.hpp"

namespace mtlab {

/// (1/k) sum_j |task_j| / |st_j + task_j| over instances j whose denominator
/// is nonzero. Throws when every instance is skipped or sizes differ.
double task_impact(std::span<const std::vector<double>> task_grads, std::span<const std::vector<double>> st_grads);

/// w_prev * m^(u / s).
double update_weight(double w_prev, double m, double u, double s);

/// MT impact is the larger of its T-Enc and decoder impacts.
inline double mt_module_rule(double m_tenc, double m_dec) { return std::max(m_tenc, m_dec); }

/// How the step enters the decay exponent.
enum class ExponentMode {
  Absolute,   // u is the current training step
  SinceLast,  // u is the number of steps since the previous update
};

std::string to_string(ExponentMode mode);
ExponentMode parse_exponent_mode(const std::string& s);

struct SchedulerConfig {
  double s_asr = 500.0;
  double s_mt = 1000.0;
  std::size_t update_every = 500;
  double prune_threshold = 0.1;
  std::size_t k = 16;
  ExponentMode exponent_mode = ExponentMode::Absolute;

  void validate() const;
  double smoothing(Task t) const;
};

struct WeightEvent {
  std::size_t step = 0;
  Task task = Task::ASR;
  double m = 1.0;
  double w = 1.0;
};

class TaskWeights {
 public:
  explicit TaskWeights(SchedulerConfig config = {}, double w_asr = 1.0, double w_mt = 1.0);

  const SchedulerConfig& config() const { return config_; }
  /// ST is fixed at 1; a task left out of training reports 0.
  double weight(Task t) const;
  double initial_weight(Task t) const;
  bool pruned(Task t) const;
  /// Enabled and not pruned.
  bool active(Task t) const;
  void disable(Task t);
  bool enabled(Task t) const;
  const std::vector<WeightEvent>& history() const { return history_; }
  std::size_t last_update() const { return last_update_; }

  /// Applies one measured impact at `step` and prunes below the threshold.
  void apply(std::size_t step, Task t, double m);
  /// Marks the end of one scheduling round (SinceLast bookkeeping).
  void finish_round(std::size_t step) { last_update_ = step; }

  /// Rebuilds weights from initial values and a history.
  static TaskWeights replay(const SchedulerConfig& config, double w_asr, double w_mt,
                            std::span<const WeightEvent> history, std::span<const Task> disabled = {});

 private:
  struct Slot {
    double initial = 1.0;
    double w = 1.0;
    bool enabled = true;
    bool pruned = false;
  };
  Slot& slot(Task t);
  const Slot& slot(Task t) const;

  SchedulerConfig config_;
  Slot asr_, mt_;
  std::vector<WeightEvent> history_;
  std::size_t last_update_ = 0;
};

/// Measures impact m for each requested auxiliary task at `step`.
using ImpactProbe = std::function<std::map<Task, double>(std::size_t step, std::span<const Task> tasks)>;

struct ScheduleOutcome {
  bool updated = false;
  std::vector<Task> newly_pruned;
  std::string warning;
};

/// One scheduling round over the active auxiliary tasks. A throwing probe
/// leaves the weights untouched and reports a warning.
ScheduleOutcome schedule_step(std::size_t step, TaskWeights& weights, const ImpactProbe& probe);

}  // namespace mtlab
