// SPDX-License-Identifier: Apache-2.0

#include "mtlab/shrink.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mtlab {

CtcPath ctc_greedy_path(std::span<const double> log_probs, std::size_t classes) {
  if (classes == 0 || log_probs.size() % classes != 0) {
    throw std::invalid_argument("ctc_greedy_path: log-prob buffer is not a multiple of the class count");
  }
  const std::size_t n = log_probs.size() / classes;
  CtcPath path;
  path.tokens.reserve(n);
  path.confidences.reserve(n);
  for (std::size_t t = 0; t < n; ++t) {
    const double* row = log_probs.data() + t * classes;
    std::size_t best = 0;
    for (std::size_t c = 1; c < classes; ++c) {
      if (row[c] > row[best]) best = c;
    }
    path.tokens.push_back(static_cast<int>(best));
    path.confidences.push_back(std::exp(row[best]));
  }
  return path;
}

ShrunkSequence merge_repeats(const CtcPath& path) {
  if (path.tokens.empty()) throw std::invalid_argument("merge_repeats: empty path");
  if (path.confidences.size() != path.tokens.size()) {
    throw std::invalid_argument("merge_repeats: tokens and confidences differ in length");
  }
  ShrunkSequence seq;
  seq.frames = path.size();
  std::size_t start = 0;
  for (std::size_t t = 1; t <= path.size(); ++t) {
    if (t < path.size() && path.tokens[t] == path.tokens[start]) continue;
    const std::size_t end = t - 1;
    std::size_t best = start;
    for (std::size_t f = start + 1; f <= end; ++f) {
      if (path.confidences[f] > path.confidences[best]) best = f;
    }
    seq.unique_tokens.push_back(path.tokens[start]);
    seq.origin_index.push_back(best);
    seq.seg_start.push_back(start);
    seq.seg_end.push_back(end);
    seq.boundary.push_back(std::max(best - start, end - best));
    start = t;
  }
  return seq;
}

std::vector<int> expand_runs(const ShrunkSequence& seq) {
  std::vector<int> out(seq.frames, -1);
  for (std::size_t i = 0; i < seq.size(); ++i) {
    for (std::size_t f = seq.seg_start[i]; f <= seq.seg_end[i]; ++f) out[f] = seq.unique_tokens[i];
  }
  return out;
}

std::vector<std::size_t> lookback_window(const ShrunkSequence& seq, std::size_t position) {
  const std::size_t j = seq.origin_index.at(position);
  const std::size_t b = seq.boundary[position];
  const std::size_t lo = j >= b ? j - b : 0;
  const std::size_t hi = std::min(j + b, seq.frames - 1);
  std::vector<std::size_t> out;
  for (std::size_t f = lo; f <= hi; ++f) {
    if (f != j) out.push_back(f);
  }
  return out;
}

LookBack LookBack::create(Initializer& init, std::size_t dim, std::size_t hidden) {
  LookBack lb;
  lb.transfer = Linear::create(init, dim, dim);
  lb.norm = Norm::create(init, dim);
  lb.ffn = FeedForward::create(init, dim, hidden);
  return lb;
}

void LookBack::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
  transfer.collect(prefix + ".transfer", out);
  norm.collect(prefix + ".norm", out);
  ffn.collect(prefix + ".ffn", out);
}

Tensor lbm_lookback(const Tensor& queries, const Tensor& frames, const std::vector<std::vector<std::int64_t>>& windows,
                    const Linear& transfer, AttentionMap* record) {
  if (queries.rank() != 2 || queries.dim(0) != windows.size()) {
    throw ShapeError("lbm_lookback", "queries " + shape_str(queries.shape()) + " for " +
                                         std::to_string(windows.size()) + " windows");
  }
  const std::size_t P = windows.size(), d = queries.dim(1);
  std::size_t W = 1;
  for (const auto& w : windows) W = std::max(W, w.size());
  std::vector<std::int64_t> index(P * W, -1);
  std::vector<std::size_t> sizes(P);
  for (std::size_t p = 0; p < P; ++p) {
    sizes[p] = windows[p].size();
    std::copy(windows[p].begin(), windows[p].end(), index.begin() + static_cast<std::ptrdiff_t>(p * W));
  }
  const Tensor window_rows = gather_rows(frames, index, {P, W});
  AttentionSpec spec;
  spec.heads = 1;
  spec.scale = 1.0;
  spec.key_lengths = sizes;
  auto r = attention(reshape(transfer(queries), {P, 1, d}), transfer(window_rows), window_rows, spec);
  if (record) {
    record->weights = r.weights;
    record->batch = r.batch;
    record->heads = r.heads;
    record->queries = r.queries;
    record->keys = r.keys;
    record->query_lengths.assign(P, 1);
    record->key_lengths = sizes;
  }
  return reshape(r.output, {P, d});
}

Tensor lbm_fuse(const Tensor& reps, const Tensor& looked, const LookBack& params) {
  return params.ffn(params.norm(add(reps, looked)));
}

ShrinkResult shrink_sequence(const Tensor& features, std::span<const std::size_t> lengths,
                             std::span<const double> log_probs, std::size_t classes, const LookBack* lookback) {
  if (features.rank() != 3 || lengths.size() != features.dim(0)) {
    throw ShapeError("shrink_sequence", shape_str(features.shape()) + " with " + std::to_string(lengths.size()) +
                                            " lengths");
  }
  const std::size_t B = features.dim(0), T = features.dim(1), d = features.dim(2);
  if (log_probs.size() != B * T * classes) {
    throw ShapeError("shrink_sequence", "log-probs hold " + std::to_string(log_probs.size()) + " values, expected " +
                                            std::to_string(B * T * classes));
  }
  ShrinkResult result;
  result.sequences.reserve(B);
  std::size_t M = 0;
  for (std::size_t b = 0; b < B; ++b) {
    if (lengths[b] == 0 || lengths[b] > T) throw ShapeError("shrink_sequence", "invalid length " + std::to_string(lengths[b]));
    auto path = ctc_greedy_path(log_probs.subspan(b * T * classes, lengths[b] * classes), classes);
    result.sequences.push_back(merge_repeats(path));
    const std::size_t m = result.sequences.back().size();
    result.lengths.push_back(m);
    M = std::max(M, m);
    result.frames_total += lengths[b];
    result.positions_total += m;
  }

  std::vector<std::int64_t> rep_index(B * M, -1);
  std::vector<std::vector<std::int64_t>> windows(B * M);
  for (std::size_t b = 0; b < B; ++b) {
    const auto& seq = result.sequences[b];
    for (std::size_t i = 0; i < seq.size(); ++i) {
      rep_index[b * M + i] = static_cast<std::int64_t>(b * T + seq.origin_index[i]);
      if (lookback) {
        for (auto f : lookback_window(seq, i)) windows[b * M + i].push_back(static_cast<std::int64_t>(b * T + f));
      }
    }
  }
  const Tensor reps = gather_rows(features, rep_index, {B, M});
  if (!lookback) {
    result.features = reps;
    return result;
  }
  const Tensor looked = lbm_lookback(reshape(reps, {B * M, d}), features, windows, lookback->transfer);
  result.features = lbm_fuse(reps, reshape(looked, {B, M, d}), *lookback);
  return result;
}

}  // namespace mtlab
