// SPDX-License-Identifier: Apache-2.0

#include "mtlab/scheduler.hpp"

#include <cmath>
#include <stdexcept>

namespace mtlab {

double task_impact(std::span<const std::vector<double>> task_grads, std::span<const std::vector<double>> st_grads) {
  if (task_grads.size() != st_grads.size()) {
    throw std::invalid_argument("task_impact: " + std::to_string(task_grads.size()) + " task instances vs " +
                                std::to_string(st_grads.size()) + " ST instances");
  }
  if (task_grads.empty()) throw std::invalid_argument("task_impact: k must be at least 1");
  double total = 0.0;
  std::size_t used = 0;
  for (std::size_t j = 0; j < task_grads.size(); ++j) {
    const auto& a = task_grads[j];
    const auto& s = st_grads[j];
    if (a.size() != s.size()) throw std::invalid_argument("task_impact: gradient sizes differ");
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      num += a[i] * a[i];
      den += (a[i] + s[i]) * (a[i] + s[i]);
    }
    if (den == 0.0) continue;
    total += std::sqrt(num) / std::sqrt(den);
    ++used;
  }
  if (used == 0) throw std::domain_error("task_impact: every instance has a zero combined gradient");
  return total / static_cast<double>(used);
}

double update_weight(double w_prev, double m, double u, double s) {
  if (!(m >= 0.0) || !std::isfinite(m)) throw std::invalid_argument("update_weight: impact must be finite and >= 0");
  if (!(s > 0.0)) throw std::invalid_argument("update_weight: smoothing coefficient must be positive");
  if (u < 0.0) throw std::invalid_argument("update_weight: negative step");
  return w_prev * std::pow(m, u / s);
}

std::string to_string(ExponentMode mode) { return mode == ExponentMode::Absolute ? "absolute" : "since_last"; }

ExponentMode parse_exponent_mode(const std::string& s) {
  if (s == "absolute") return ExponentMode::Absolute;
  if (s == "since_last") return ExponentMode::SinceLast;
  throw std::invalid_argument("unknown exponent mode '" + s + "' (expected absolute or since_last)");
}

void SchedulerConfig::validate() const {
  if (!(s_asr > 0.0) || !(s_mt > 0.0)) throw std::invalid_argument("scheduler: smoothing coefficients must be positive");
  if (update_every == 0) throw std::invalid_argument("scheduler: update_every must be positive");
  if (prune_threshold < 0.0) throw std::invalid_argument("scheduler: prune_threshold must be non-negative");
  if (k == 0) throw std::invalid_argument("scheduler: k must be at least 1");
}

double SchedulerConfig::smoothing(Task t) const {
  if (t == Task::ASR) return s_asr;
  if (t == Task::MT) return s_mt;
  throw std::invalid_argument("scheduler: ST has no smoothing coefficient");
}

TaskWeights::TaskWeights(SchedulerConfig config, double w_asr, double w_mt) : config_(config) {
  config_.validate();
  if (w_asr < 0.0 || w_mt < 0.0) throw std::invalid_argument("task weights must be non-negative");
  asr_.initial = asr_.w = w_asr;
  mt_.initial = mt_.w = w_mt;
}

TaskWeights::Slot& TaskWeights::slot(Task t) {
  if (t == Task::ASR) return asr_;
  if (t == Task::MT) return mt_;
  throw std::invalid_argument("ST weight is fixed at 1");
}

const TaskWeights::Slot& TaskWeights::slot(Task t) const { return const_cast<TaskWeights*>(this)->slot(t); }

double TaskWeights::weight(Task t) const {
  if (t == Task::ST) return 1.0;
  const Slot& s = slot(t);
  return s.enabled && !s.pruned ? s.w : 0.0;
}

double TaskWeights::initial_weight(Task t) const { return t == Task::ST ? 1.0 : slot(t).initial; }
bool TaskWeights::pruned(Task t) const { return t != Task::ST && slot(t).pruned; }
bool TaskWeights::enabled(Task t) const { return t == Task::ST || slot(t).enabled; }
bool TaskWeights::active(Task t) const { return enabled(t) && !pruned(t); }
void TaskWeights::disable(Task t) { slot(t).enabled = false; }

void TaskWeights::apply(std::size_t step, Task t, double m) {
  Slot& s = slot(t);
  if (!s.enabled || s.pruned) throw std::logic_error("scheduler: " + to_string(t) + " is not active");
  const std::size_t u = config_.exponent_mode == ExponentMode::Absolute ? step : step - std::min(step, last_update_);
  s.w = update_weight(s.w, m, static_cast<double>(u), config_.smoothing(t));
  if (s.w < config_.prune_threshold) s.pruned = true;
  history_.push_back({step, t, m, s.w});
}

TaskWeights TaskWeights::replay(const SchedulerConfig& config, double w_asr, double w_mt,
                                std::span<const WeightEvent> history, std::span<const Task> disabled) {
  TaskWeights w(config, w_asr, w_mt);
  for (Task t : disabled) w.disable(t);
  std::size_t round = 0;
  bool open = false;
  for (const auto& e : history) {
    if (open && e.step != round) w.finish_round(round);
    round = e.step;
    open = true;
    w.apply(e.step, e.task, e.m);
  }
  if (open) w.finish_round(round);
  return w;
}

ScheduleOutcome schedule_step(std::size_t step, TaskWeights& weights, const ImpactProbe& probe) {
  ScheduleOutcome out;
  std::vector<Task> tasks;
  for (Task t : {Task::ASR, Task::MT}) {
    if (weights.active(t)) tasks.push_back(t);
  }
  if (tasks.empty()) return out;
  std::map<Task, double> impacts;
  try {
    impacts = probe(step, tasks);
    for (Task t : tasks) {
      if (!impacts.contains(t)) throw std::runtime_error("probe returned no impact for " + to_string(t));
      const double m = impacts.at(t);
      if (!(m >= 0.0) || !std::isfinite(m)) throw std::runtime_error("invalid impact for " + to_string(t));
    }
  } catch (const std::exception& e) {
    out.warning = std::string("impact probe failed at step ") + std::to_string(step) + ": " + e.what();
    return out;
  }
  for (Task t : tasks) {
    weights.apply(step, t, impacts.at(t));
    if (weights.pruned(t)) out.newly_pruned.push_back(t);
  }
  weights.finish_round(step);
  out.updated = true;
  return out;
}

}  // namespace mtlab
