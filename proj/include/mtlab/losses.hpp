// SPDX-License-Identifier: Apache-2.0
//
// Training objectives and their weighted combination.

#pragma once

#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "mtlab/model.hpp"

namespace mtlab {

/// Raised when a CTC target cannot be aligned to the available frames.
class CtcInfeasible : public std::domain_error {
 public:
  CtcInfeasible(std::size_t frames, std::size_t required)
      : std::domain_error("ctc: " + std::to_string(frames) + " frames cannot emit a target needing " +
                          std::to_string(required)),
        frames_(frames), required_(required) {}
  std::size_t frames() const { return frames_; }
  std::size_t required() const { return required_; }

 private:
  std::size_t frames_, required_;
};

/// Frames a CTC path needs for `target`: its length plus one blank per
/// adjacent repeated pair.
std::size_t ctc_min_frames(std::span<const int> target);

/// -log P(target | log_probs) for one sequence of `frames` rows of `classes`
/// log-probabilities, blank id 0. Forward algorithm in log space.
double ctc_neg_log_likelihood(std::span<const double> log_probs, std::size_t frames, std::size_t classes,
                              std::span<const int> target);

/// Batch mean of per-sequence CTC losses, each divided by its target length
/// (empty targets count as one). `log_probs` is [B, T, C].
Tensor ctc_loss(const Tensor& log_probs, std::span<const std::size_t> lengths,
                const std::vector<std::vector<int>>& targets);

/// Mean token NLL of `logits` [..., V] against `targets`, skipping pad.
Tensor ce_loss(const Tensor& logits, std::span<const int> targets, int pad_id);

inline constexpr double kContrastiveTemperature = 0.1;

/// Mean over i of -s_ii + log sum_{j != i} exp(s_ij), with s the cosine of
/// mean-pooled sequences divided by tau. Negative when positives dominate.
Tensor contrastive_loss(const Tensor& speech, std::span<const std::size_t> speech_lens, const Tensor& text,
                        std::span<const std::size_t> text_lens, double tau = kContrastiveTemperature);

/// MSE between LN(a_i) and LN(b_i) over valid positions and channels,
/// averaged over layers i. Each tensor is [B, L, d]; `lengths` masks padding.
Tensor consistency_loss(std::span<const Tensor> extractor_outs, std::span<const Tensor> attention_outs,
                        std::span<const std::size_t> lengths);

struct LossWeights {
  double asr = 1.0;
  double mt = 1.0;
  double cl = 0.3;
  double consistency = 1.0;

  void validate() const;
};

struct LossBundle {
  Tensor l_st, l_asr, l_mt, l_cl, l_consistency;
  LossWeights weights;
  Tensor total;

  /// Component value or 0 when absent.
  static double value(const Tensor& t) { return t.defined() ? t.item() : 0.0; }
};

/// total = l_st + w_a l_asr + w_m l_mt + w_c l_cl + w_k l_consistency over
/// the defined components. Throws on negative weights or no components.
LossBundle total_loss(Tensor l_st, Tensor l_asr, Tensor l_mt, Tensor l_cl, Tensor l_consistency,
                      const LossWeights& weights);

/// Builds every component available in a forward result. Consistency terms
/// of the speech and text streams are summed.
LossBundle compute_losses(const ForwardResult& forward, const Symbols& symbols, const LossWeights& weights,
                          bool use_contrastive, bool use_consistency);

}  // namespace mtlab
