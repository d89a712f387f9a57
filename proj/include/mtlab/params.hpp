// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <compare>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mtlab/tensor.hpp"

namespace mtlab {

enum class Partition { AEnc, TEnc, Decoder };
enum class SublayerKind { Atten, Ffn, Other };

std::string to_string(Partition p);
std::string to_string(SublayerKind k);
Partition parse_partition(const std::string& s);
SublayerKind parse_kind(const std::string& s);

/// Identifies a parameter group. Layer -1 holds pre-stack parameters
/// (input projections, embeddings); indices past the last layer hold heads.
struct GroupKey {
  Partition partition = Partition::AEnc;
  int layer = -1;
  SublayerKind kind = SublayerKind::Other;

  auto operator<=>(const GroupKey&) const = default;
};

std::string to_string(const GroupKey& key);

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct ParamGroup {
  GroupKey key;
  std::vector<NamedTensor> tensors;

  std::size_t size() const;
};

/// Ordered set of parameter groups. Groups must be added in strictly
/// increasing key order, which pins flattening order across runs.
class ParamRegistry {
 public:
  void add_group(ParamGroup group);

  std::span<const ParamGroup> groups() const { return groups_; }
  const ParamGroup& group(const GroupKey& key) const;
  bool contains(const GroupKey& key) const;

  /// Every parameter tensor in group order.
  std::vector<NamedTensor> tensors() const;
  std::size_t parameter_count() const;
  void clear_grads() const;

 private:
  std::vector<ParamGroup> groups_;
};

struct FlatGrad {
  GroupKey key;
  std::vector<double> values;
};

using GroupFilter = std::function<bool(const GroupKey&)>;

/// Concatenated gradients of every group matching `filter`, in registry
/// order. Throws GraphError naming the first group with a missing gradient.
std::vector<FlatGrad> flatten_grads(const ParamRegistry& registry, const GroupFilter& filter);

/// Concatenated gradients of a single group.
std::vector<double> flatten_group(const ParamGroup& group);

/// True when at least one member tensor holds a gradient.
bool group_touched(const ParamGroup& group);

}  // namespace mtlab
