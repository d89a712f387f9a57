// SPDX-License-Identifier: Apache-2.0
//
// Gradient capture, cross-task gradient cosines, task impact probes and
// attention entropy.

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mtlab/losses.hpp"
#include "mtlab/scheduler.hpp"
#include "mtlab/model.hpp"

namespace mtlab {

struct GroupGrad {
  std::vector<double> values;
  /// Sizes of the member tensors, in registry order.
  std::vector<std::size_t> tensor_sizes;
};

/// Flattened gradients of one task on one batch. Groups the task never
/// touches are absent.
struct GradSnapshot {
  Task task = Task::ST;
  std::uint64_t batch_id = 0;
  std::map<GroupKey, GroupGrad> groups;

  bool has(const GroupKey& key) const { return groups.contains(key); }
};

/// Backward of the task's own loss (weight 1, no auxiliary terms) with
/// dropout and text noise disabled. Leaves parameter gradients cleared.
/// A positive `contrastive_weight` adds that multiple of the contrastive
/// loss to an ST capture.
GradSnapshot capture_gradients(const Model& model, const SyntheticBatch& batch, Task task,
                               const ForwardOptions& options, std::uint64_t batch_id = 0,
                               double contrastive_weight = 0.0);

double cosine(std::span<const double> a, std::span<const double> b);

enum class CosineMode {
  Concatenate,    // one vector per selection
  PerMatrixMean,  // mean of per-tensor cosines
};

std::string to_string(CosineMode mode);
CosineMode parse_cosine_mode(const std::string& s);

/// Cosine over the groups present in both snapshots and accepted by
/// `filter`. Throws when no group qualifies.
double grad_consistency(const GradSnapshot& a, const GradSnapshot& b, const GroupFilter& filter,
                        CosineMode mode = CosineMode::Concatenate);

struct LayerCosine {
  int layer = 0;
  double value = 0.0;
};

/// One cosine per layer of `partition` for sublayer `kind`.
std::vector<LayerCosine> grad_consistency_per_layer(const GradSnapshot& a, const GradSnapshot& b,
                                                    Partition partition, SublayerKind kind,
                                                    CosineMode mode = CosineMode::Concatenate);

struct ConsistencyRow {
  Partition partition = Partition::AEnc;
  SublayerKind kind = SublayerKind::Atten;
  std::optional<int> layer;  // empty for module level
  std::vector<double> values;  // one per repeat
  double mean = 0.0;
  double std = 0.0;
};

struct ConsistencyReport {
  Task a = Task::ASR;
  Task b = Task::ST;
  std::size_t n = 0;
  std::size_t repeats = 0;
  std::vector<ConsistencyRow> rows;

  const ConsistencyRow* find(Partition p, SublayerKind k, std::optional<int> layer = std::nullopt) const;
  /// CSV with header partition,kind,layer,mean,std.
  std::string to_csv() const;
};

struct ProtocolOptions {
  std::size_t n = 200;
  std::size_t repeats = 5;
  std::uint64_t seed = 0;
  bool per_layer = false;
  CosineMode mode = CosineMode::Concatenate;
  /// Forward settings for both tasks; rng is ignored.
  ForwardOptions forward;
  /// Weight of the contrastive term added to ST captures (0 = none).
  double st_contrastive_weight = 0.0;
};

/// Draws `repeats` probe sets of n seeds from `pool` (sorted, without
/// replacement), captures both tasks on each and reduces every
/// partition x {ATTEN, FFN} selection the two tasks share.
ConsistencyReport consistency_protocol(const Model& model, const Corpus& corpus, std::span<const std::uint64_t> pool,
                                       Task a, Task b, const ProtocolOptions& options);

/// Deterministic probe pool disjoint in practice from training draws.
std::vector<std::uint64_t> probe_pool(std::uint64_t seed, std::size_t size);

struct TrainingConsistencyRow {
  std::size_t step = 0;
  ConsistencyRow row;
};

/// Loads a model for a checkpoint; nullopt when the checkpoint is missing.
using CheckpointLoader = std::function<std::optional<Model>(const std::string& path)>;

struct CheckpointRef {
  std::size_t step = 0;
  std::string path;
};

/// consistency_protocol at every checkpoint in step order; missing
/// checkpoints are skipped and listed in `warnings`.
std::vector<TrainingConsistencyRow> consistency_over_training(std::span<const CheckpointRef> checkpoints,
                                                              const CheckpointLoader& load, const Corpus& corpus,
                                                              std::span<const std::uint64_t> pool, Task a, Task b,
                                                              const ProtocolOptions& options,
                                                              std::vector<std::string>* warnings = nullptr);

/// Base-2 entropy of one distribution; 0 log 0 = 0. Throws when the row
/// does not sum to 1 within 1e-6 or holds a negative entry.
double row_entropy_bits(std::span<const double> row);

/// Mean row entropy of one attention map over heads, valid queries and
/// batch. Rows are renormalized over valid keys first.
double attention_entropy(const AttentionMap& map);

/// Per layer entropies for a stack of maps.
std::vector<double> attention_entropy(std::span<const AttentionMap> layers);

/// Impacts of the requested auxiliary tasks measured on single-example
/// instances. ASR reads A-Enc ATTEN gradients; MT takes the larger of its
/// T-Enc and decoder ATTEN impacts.
struct ImpactDetail {
  std::map<Task, double> m;
  double m_tenc = 0.0;
  double m_dec = 0.0;
};
ImpactDetail measure_task_impact(const Model& model, const Corpus& corpus, std::span<const std::uint64_t> instances,
                                 std::span<const Task> tasks, const ForwardOptions& options);

}  // namespace mtlab
