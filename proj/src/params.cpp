// SPDX-License-Identifier: Apache-2.0

#include "mtlab/params.hpp"

#include <algorithm>
#include <stdexcept>

namespace mtlab {

std::string to_string(Partition p) {
  switch (p) {
    case Partition::AEnc: return "A-Enc";
    case Partition::TEnc: return "T-Enc";
    case Partition::Decoder: return "Decoder";
  }
  return "?";
}

std::string to_string(SublayerKind k) {
  switch (k) {
    case SublayerKind::Atten: return "ATTEN";
    case SublayerKind::Ffn: return "FFN";
    case SublayerKind::Other: return "OTHER";
  }
  return "?";
}

Partition parse_partition(const std::string& s) {
  if (s == "A-Enc") return Partition::AEnc;
  if (s == "T-Enc") return Partition::TEnc;
  if (s == "Decoder") return Partition::Decoder;
  throw std::invalid_argument("unknown partition '" + s + "'");
}

SublayerKind parse_kind(const std::string& s) {
  if (s == "ATTEN") return SublayerKind::Atten;
  if (s == "FFN") return SublayerKind::Ffn;
  if (s == "OTHER") return SublayerKind::Other;
  throw std::invalid_argument("unknown sublayer kind '" + s + "'");
}

std::string to_string(const GroupKey& key) {
  return to_string(key.partition) + "/" + std::to_string(key.layer) + "/" + to_string(key.kind);
}

std::size_t ParamGroup::size() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.tensor.numel();
  return n;
}

void ParamRegistry::add_group(ParamGroup group) {
  if (!groups_.empty() && !(groups_.back().key < group.key)) {
    throw std::logic_error("parameter group " + to_string(group.key) + " registered after " +
                           to_string(groups_.back().key) + "; groups must be added in key order");
  }
  if (group.tensors.empty()) throw std::logic_error("parameter group " + to_string(group.key) + " is empty");
  groups_.push_back(std::move(group));
}

const ParamGroup& ParamRegistry::group(const GroupKey& key) const {
  auto it = std::lower_bound(groups_.begin(), groups_.end(), key,
                             [](const ParamGroup& g, const GroupKey& k) { return g.key < k; });
  if (it == groups_.end() || it->key != key) throw std::out_of_range("no parameter group " + to_string(key));
  return *it;
}

bool ParamRegistry::contains(const GroupKey& key) const {
  auto it = std::lower_bound(groups_.begin(), groups_.end(), key,
                             [](const ParamGroup& g, const GroupKey& k) { return g.key < k; });
  return it != groups_.end() && it->key == key;
}

std::vector<NamedTensor> ParamRegistry::tensors() const {
  std::vector<NamedTensor> out;
  for (const auto& g : groups_) out.insert(out.end(), g.tensors.begin(), g.tensors.end());
  return out;
}

std::size_t ParamRegistry::parameter_count() const {
  std::size_t n = 0;
  for (const auto& g : groups_) n += g.size();
  return n;
}

void ParamRegistry::clear_grads() const {
  for (const auto& g : groups_) {
    for (auto t : g.tensors) t.tensor.clear_grad();
  }
}

bool group_touched(const ParamGroup& group) {
  return std::any_of(group.tensors.begin(), group.tensors.end(),
                     [](const NamedTensor& t) { return t.tensor.has_grad(); });
}

std::vector<double> flatten_group(const ParamGroup& group) {
  std::vector<double> out;
  out.reserve(group.size());
  for (const auto& t : group.tensors) {
    if (!t.tensor.has_grad()) {
      throw GraphError("group " + to_string(group.key) + " has no gradient for '" + t.name + "'");
    }
    const auto g = t.tensor.grad();
    out.insert(out.end(), g.begin(), g.end());
  }
  return out;
}

std::vector<FlatGrad> flatten_grads(const ParamRegistry& registry, const GroupFilter& filter) {
  std::vector<FlatGrad> out;
  for (const auto& g : registry.groups()) {
    if (filter && !filter(g.key)) continue;
    out.push_back({g.key, flatten_group(g)});
  }
  return out;
}

}  // namespace mtlab
