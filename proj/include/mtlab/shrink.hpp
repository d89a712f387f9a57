// SPDX-License-Identifier: Apache-2.0
//
// CTC-driven length compression with look-back recovery.
//
// A greedy CTC path is cut into maximal runs of equal labels (blank runs
// included). Each run keeps its most confident frame. The look-back step
// lets that frame attend over the frames of a window around it, so the
// discarded frames still contribute to the output and receive gradient.

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mtlab/layers.hpp"

namespace mtlab {

struct CtcPath {
  std::vector<int> tokens;
  std::vector<double> confidences;

  std::size_t size() const { return tokens.size(); }
};

/// Per-frame argmax of `log_probs` ([frames, classes] row-major). Ties go to
/// the lower class id, so uniform rows decode as blank.
CtcPath ctc_greedy_path(std::span<const double> log_probs, std::size_t classes);

struct ShrunkSequence {
  std::size_t frames = 0;
  std::vector<int> unique_tokens;
  /// Representative frame of each run.
  std::vector<std::size_t> origin_index;
  std::vector<std::size_t> seg_start;
  std::vector<std::size_t> seg_end;  // inclusive
  /// Look-back radius around origin_index covering the whole run.
  std::vector<std::size_t> boundary;

  std::size_t size() const { return unique_tokens.size(); }
};

/// One position per maximal run of equal tokens; the representative is the
/// most confident frame (leftmost on ties). b = max(j - start, end - j).
ShrunkSequence merge_repeats(const CtcPath& path);

/// Per-frame labels rebuilt from run extents; inverts merge_repeats.
std::vector<int> expand_runs(const ShrunkSequence& seq);

/// Frames in [j - b, j + b] clipped to the sequence, excluding j itself.
std::vector<std::size_t> lookback_window(const ShrunkSequence& seq, std::size_t position);

struct LookBack {
  Linear transfer;
  Norm norm;
  FeedForward ffn;

  static LookBack create(Initializer& init, std::size_t dim, std::size_t hidden);
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;
};

/// softmax(R(q_p) . R(A_p)^T) . A_p for every position p, where A_p holds
/// the rows of `frames` listed in `windows[p]`. An empty window yields a
/// zero vector. `queries` is [P, d]; the result is [P, d].
Tensor lbm_lookback(const Tensor& queries, const Tensor& frames,
                    const std::vector<std::vector<std::int64_t>>& windows, const Linear& transfer,
                    AttentionMap* record = nullptr);

/// FFN(Norm(reps + looked)).
Tensor lbm_fuse(const Tensor& reps, const Tensor& looked, const LookBack& params);

struct ShrinkResult {
  Tensor features;  // [B, M, d], zero rows past lengths[b] before fusion
  std::vector<std::size_t> lengths;
  std::vector<ShrunkSequence> sequences;
  std::size_t frames_total = 0;
  std::size_t positions_total = 0;

  double length_ratio() const {
    return frames_total ? static_cast<double>(positions_total) / static_cast<double>(frames_total) : 0.0;
  }
};

/// Shrinks `features` [B, T, d] using greedy paths read from `log_probs`
/// ([B, T, classes] values). With `lookback` null the representatives are
/// passed through unchanged (plain shrinking).
ShrinkResult shrink_sequence(const Tensor& features, std::span<const std::size_t> lengths,
                             std::span<const double> log_probs, std::size_t classes, const LookBack* lookback);

}  // namespace mtlab
