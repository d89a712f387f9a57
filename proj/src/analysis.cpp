// SPDX-License-Identifier: Apache-2.0

#include "mtlab/analysis.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace mtlab {

namespace {

Tensor task_loss(const TaskOutputs& out, const Symbols& symbols) {
  const int pad = symbols.pad();
  Tensor loss;
  if (out.ctc_log_probs.defined()) loss = ctc_loss(out.ctc_log_probs, out.ctc_lengths, out.ctc_targets);
  if (out.logits.defined()) {
    const Tensor ce = ce_loss(out.logits, out.targets, pad);
    loss = loss.defined() ? add(loss, ce) : ce;
  }
  if (!loss.defined()) throw std::logic_error(to_string(out.task) + " produced no loss");
  return loss;
}

GroupGrad group_grad(const ParamGroup& group) {
  GroupGrad g;
  g.values.reserve(group.size());
  for (const auto& t : group.tensors) {
    g.tensor_sizes.push_back(t.tensor.numel());
    if (t.tensor.has_grad()) {
      const auto v = t.tensor.grad();
      g.values.insert(g.values.end(), v.begin(), v.end());
    } else {
      g.values.insert(g.values.end(), t.tensor.numel(), 0.0);
    }
  }
  return g;
}

double sample_std(std::span<const double> v, double mean) {
  if (v.size() < 2) return 0.0;
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

// Concatenation of the groups matching `filter`, zeros where the snapshot
// lacks a group, so every instance yields vectors of the same layout.
std::vector<double> gather(const GradSnapshot& snap, const ParamRegistry& registry, const GroupFilter& filter) {
  std::vector<double> out;
  for (const auto& g : registry.groups()) {
    if (!filter(g.key)) continue;
    auto it = snap.groups.find(g.key);
    if (it == snap.groups.end()) {
      out.insert(out.end(), g.size(), 0.0);
    } else {
      out.insert(out.end(), it->second.values.begin(), it->second.values.end());
    }
  }
  return out;
}

GroupFilter attention_of(Partition p) {
  return [p](const GroupKey& k) { return k.partition == p && k.kind == SublayerKind::Atten; };
}

}  // namespace

GradSnapshot capture_gradients(const Model& model, const SyntheticBatch& batch, Task task,
                               const ForwardOptions& options, std::uint64_t batch_id, double contrastive_weight) {
  if (contrastive_weight < 0.0) throw std::invalid_argument("gradient capture: negative contrastive weight");
  const bool with_cl = task == Task::ST && contrastive_weight > 0.0;
  ForwardOptions opts = options;
  opts.rng = nullptr;
  opts.want_clean_text = with_cl;
  opts.record_attention = false;
  const auto& registry = model.params();
  registry.clear_grads();
  GradSnapshot snap;
  snap.task = task;
  snap.batch_id = batch_id;
  try {
    const std::array<Task, 1> only{task};
    const auto result = model.forward(batch, only, opts);
    const auto& out = result.at(task);
    Tensor loss = task_loss(out, model.symbols());
    if (with_cl) {
      const auto& enc = *out.encoding;
      const Tensor cl = contrastive_loss(enc.input, enc.lengths, result.clean_text, result.clean_text_lengths);
      loss = add(loss, scale(cl, contrastive_weight));
    }
    loss.backward();
  } catch (const std::exception& e) {
    registry.clear_grads();
    throw std::runtime_error("gradient capture for " + to_string(task) + " failed: " + e.what());
  }
  for (const auto& g : registry.groups()) {
    if (group_touched(g)) snap.groups.emplace(g.key, group_grad(g));
  }
  registry.clear_grads();
  return snap;
}

double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine: vectors differ in length");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  if (na == nb && dot == na) return 1.0;
  if (na == nb && dot == -na) return -1.0;
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

std::string to_string(CosineMode mode) { return mode == CosineMode::Concatenate ? "concatenate" : "per_matrix"; }

CosineMode parse_cosine_mode(const std::string& s) {
  if (s == "concatenate") return CosineMode::Concatenate;
  if (s == "per_matrix") return CosineMode::PerMatrixMean;
  throw std::invalid_argument("unknown cosine mode '" + s + "' (expected concatenate or per_matrix)");
}

double grad_consistency(const GradSnapshot& a, const GradSnapshot& b, const GroupFilter& filter, CosineMode mode) {
  std::vector<double> va, vb;
  double matrix_sum = 0.0;
  std::size_t matrices = 0;
  for (const auto& [key, ga] : a.groups) {
    if (!filter(key)) continue;
    auto it = b.groups.find(key);
    if (it == b.groups.end()) continue;
    const auto& gb = it->second;
    if (ga.values.size() != gb.values.size()) {
      throw std::invalid_argument("grad_consistency: group " + to_string(key) + " differs in size");
    }
    if (mode == CosineMode::Concatenate) {
      va.insert(va.end(), ga.values.begin(), ga.values.end());
      vb.insert(vb.end(), gb.values.begin(), gb.values.end());
      continue;
    }
    std::size_t off = 0;
    for (std::size_t n : ga.tensor_sizes) {
      matrix_sum += cosine(std::span(ga.values).subspan(off, n), std::span(gb.values).subspan(off, n));
      ++matrices;
      off += n;
    }
  }
  if (va.empty() && matrices == 0) throw std::invalid_argument("tasks share no parameters under filter");
  return mode == CosineMode::Concatenate ? cosine(va, vb) : matrix_sum / static_cast<double>(matrices);
}

std::vector<LayerCosine> grad_consistency_per_layer(const GradSnapshot& a, const GradSnapshot& b, Partition partition,
                                                    SublayerKind kind, CosineMode mode) {
  std::vector<LayerCosine> out;
  for (const auto& [key, ga] : a.groups) {
    if (key.partition != partition || key.kind != kind || !b.has(key)) continue;
    const int layer = key.layer;
    out.push_back({layer, grad_consistency(a, b, [&](const GroupKey& k) { return k == key; }, mode)});
  }
  if (out.empty()) throw std::invalid_argument("tasks share no parameters under filter");
  return out;
}

const ConsistencyRow* ConsistencyReport::find(Partition p, SublayerKind k, std::optional<int> layer) const {
  for (const auto& r : rows) {
    if (r.partition == p && r.kind == k && r.layer == layer) return &r;
  }
  return nullptr;
}

std::string ConsistencyReport::to_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "partition,kind,layer,mean,std\n";
  for (const auto& r : rows) {
    os << to_string(r.partition) << ',' << to_string(r.kind) << ',' << (r.layer ? std::to_string(*r.layer) : "all")
       << ',' << r.mean << ',' << r.std << '\n';
  }
  return os.str();
}

std::vector<std::uint64_t> probe_pool(std::uint64_t seed, std::size_t size) {
  auto rng = make_rng(seed, 0x9e0be);
  std::vector<std::uint64_t> out(size);
  for (auto& s : out) s = rng();
  return out;
}

ConsistencyReport consistency_protocol(const Model& model, const Corpus& corpus, std::span<const std::uint64_t> pool,
                                       Task a, Task b, const ProtocolOptions& options) {
  if (options.n == 0 || options.repeats == 0) throw std::invalid_argument("consistency protocol: n and repeats must be positive");
  if (pool.size() < options.n) {
    throw std::invalid_argument("consistency protocol: pool of " + std::to_string(pool.size()) +
                                " samples is smaller than n = " + std::to_string(options.n));
  }
  ConsistencyReport report;
  report.a = a;
  report.b = b;
  report.n = options.n;
  report.repeats = options.repeats;

  struct Selection {
    Partition p;
    SublayerKind k;
    std::optional<int> layer;
  };
  std::vector<Selection> selections;
  for (Partition p : {Partition::AEnc, Partition::TEnc, Partition::Decoder}) {
    for (SublayerKind k : {SublayerKind::Atten, SublayerKind::Ffn}) {
      if (!options.per_layer) {
        selections.push_back({p, k, std::nullopt});
        continue;
      }
      for (const auto& g : model.params().groups()) {
        if (g.key.partition == p && g.key.kind == k) selections.push_back({p, k, g.key.layer});
      }
    }
  }
  std::vector<std::vector<double>> values(selections.size());
  std::vector<bool> present(selections.size(), true);

  for (std::size_t r = 0; r < options.repeats; ++r) {
    std::vector<std::uint64_t> seeds;
    auto rng = make_rng(options.seed, 1000 + r);
    std::sample(pool.begin(), pool.end(), std::back_inserter(seeds), static_cast<std::ptrdiff_t>(options.n), rng);
    std::sort(seeds.begin(), seeds.end());
    const auto batch = corpus.batch(seeds);
    const auto sa = capture_gradients(model, batch, a, options.forward, r, options.st_contrastive_weight);
    const auto sb = capture_gradients(model, batch, b, options.forward, r, options.st_contrastive_weight);
    for (std::size_t i = 0; i < selections.size(); ++i) {
      if (!present[i]) continue;
      const auto& sel = selections[i];
      auto filter = [&sel](const GroupKey& k) {
        return k.partition == sel.p && k.kind == sel.k && (!sel.layer || k.layer == *sel.layer);
      };
      try {
        values[i].push_back(grad_consistency(sa, sb, filter, options.mode));
      } catch (const std::invalid_argument&) {
        present[i] = false;
      }
    }
  }
  for (std::size_t i = 0; i < selections.size(); ++i) {
    if (!present[i]) continue;
    ConsistencyRow row;
    row.partition = selections[i].p;
    row.kind = selections[i].k;
    row.layer = selections[i].layer;
    row.values = values[i];
    row.mean = std::accumulate(row.values.begin(), row.values.end(), 0.0) / static_cast<double>(row.values.size());
    row.std = sample_std(row.values, row.mean);
    report.rows.push_back(std::move(row));
  }
  if (report.rows.empty()) throw std::invalid_argument("tasks share no parameters under filter");
  return report;
}

std::vector<TrainingConsistencyRow> consistency_over_training(std::span<const CheckpointRef> checkpoints,
                                                              const CheckpointLoader& load, const Corpus& corpus,
                                                              std::span<const std::uint64_t> pool, Task a, Task b,
                                                              const ProtocolOptions& options,
                                                              std::vector<std::string>* warnings) {
  std::vector<CheckpointRef> ordered(checkpoints.begin(), checkpoints.end());
  std::stable_sort(ordered.begin(), ordered.end(), [](const auto& x, const auto& y) { return x.step < y.step; });
  std::vector<TrainingConsistencyRow> out;
  for (const auto& ref : ordered) {
    auto model = load(ref.path);
    if (!model) {
      if (warnings) warnings->push_back("missing checkpoint " + ref.path + " skipped");
      continue;
    }
    const auto report = consistency_protocol(*model, corpus, pool, a, b, options);
    for (const auto& row : report.rows) out.push_back({ref.step, row});
  }
  return out;
}

double row_entropy_bits(std::span<const double> row) {
  double total = 0.0;
  for (double p : row) {
    if (p < 0.0 || !std::isfinite(p)) throw std::invalid_argument("entropy: invalid probability");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-6) {
    throw std::invalid_argument("entropy: row sums to " + std::to_string(total) + ", not 1");
  }
  double h = 0.0;
  for (double p : row) {
    if (p > 0.0) h -= p * std::log2(p);
  }
  return h;
}

double attention_entropy(const AttentionMap& map) {
  if (!map.weights) throw std::invalid_argument("entropy: attention map holds no weights");
  double total = 0.0;
  std::size_t rows = 0;
  std::vector<double> row;
  for (std::size_t b = 0; b < map.batch; ++b) {
    const std::size_t q_len = map.query_lengths.empty() ? map.queries : std::min(map.query_lengths[b], map.queries);
    const std::size_t k_len = map.key_lengths.empty() ? map.keys : std::min(map.key_lengths[b], map.keys);
    if (k_len == 0) continue;
    for (std::size_t h = 0; h < map.heads; ++h) {
      for (std::size_t i = 0; i < q_len; ++i) {
        row.assign(k_len, 0.0);
        double s = 0.0;
        for (std::size_t j = 0; j < k_len; ++j) s += (row[j] = map.at(b, h, i, j));
        if (std::abs(s - 1.0) > 1e-6) {
          throw std::invalid_argument("entropy: attention row sums to " + std::to_string(s) + " over valid keys");
        }
        for (double& p : row) p /= s;
        total += row_entropy_bits(row);
        ++rows;
      }
    }
  }
  if (rows == 0) throw std::invalid_argument("entropy: attention map has no valid rows");
  return total / static_cast<double>(rows);
}

std::vector<double> attention_entropy(std::span<const AttentionMap> layers) {
  std::vector<double> out;
  out.reserve(layers.size());
  for (const auto& m : layers) out.push_back(attention_entropy(m));
  return out;
}

ImpactDetail measure_task_impact(const Model& model, const Corpus& corpus, std::span<const std::uint64_t> instances,
                                 std::span<const Task> tasks, const ForwardOptions& options) {
  if (instances.empty()) throw std::invalid_argument("task impact: no probe instances");
  const auto& registry = model.params();
  const bool want_asr = std::find(tasks.begin(), tasks.end(), Task::ASR) != tasks.end();
  const bool want_mt = std::find(tasks.begin(), tasks.end(), Task::MT) != tasks.end();
  std::vector<std::vector<double>> st_a, asr_a, st_t, mt_t, st_d, mt_d;
  for (std::size_t j = 0; j < instances.size(); ++j) {
    const std::uint64_t seed = instances[j];
    const auto batch = corpus.batch(std::span(&seed, 1));
    const auto st = capture_gradients(model, batch, Task::ST, options, j);
    if (want_asr) {
      const auto asr = capture_gradients(model, batch, Task::ASR, options, j);
      st_a.push_back(gather(st, registry, attention_of(Partition::AEnc)));
      asr_a.push_back(gather(asr, registry, attention_of(Partition::AEnc)));
    }
    if (want_mt) {
      const auto mt = capture_gradients(model, batch, Task::MT, options, j);
      st_t.push_back(gather(st, registry, attention_of(Partition::TEnc)));
      mt_t.push_back(gather(mt, registry, attention_of(Partition::TEnc)));
      st_d.push_back(gather(st, registry, attention_of(Partition::Decoder)));
      mt_d.push_back(gather(mt, registry, attention_of(Partition::Decoder)));
    }
  }
  ImpactDetail out;
  if (want_asr) out.m[Task::ASR] = task_impact(asr_a, st_a);
  if (want_mt) {
    out.m_tenc = task_impact(mt_t, st_t);
    out.m_dec = task_impact(mt_d, st_d);
    out.m[Task::MT] = mt_module_rule(out.m_tenc, out.m_dec);
  }
  return out;
}

}  // namespace mtlab
