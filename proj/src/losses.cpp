// SPDX-License-Identifier: Apache-2.0

#include "mtlab/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace mtlab {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double hi = std::max(a, b);
  return hi + std::log1p(std::exp(std::min(a, b) - hi));
}

struct CtcLattice {
  std::vector<int> labels;    // blank-interleaved target, size S = 2L + 1
  std::vector<double> alpha;  // [T, S], emission at t included
  std::vector<double> beta;   // [T, S], emission at t included
  double log_likelihood = 0.0;
};

CtcLattice ctc_lattice(std::span<const double> lp, std::size_t T, std::size_t C, std::span<const int> target,
                       bool with_beta) {
  for (int t : target) {
    if (t <= kBlankId || static_cast<std::size_t>(t) >= C) {
      throw std::invalid_argument("ctc: target id " + std::to_string(t) + " outside 1.." + std::to_string(C - 1));
    }
  }
  if (T == 0) throw CtcInfeasible(0, ctc_min_frames(target));
  if (lp.size() < T * C) throw ShapeError("ctc", "log-prob buffer too small");
  const std::size_t need = ctc_min_frames(target);
  if (T < need) throw CtcInfeasible(T, need);

  CtcLattice lat;
  const std::size_t S = 2 * target.size() + 1;
  lat.labels.assign(S, kBlankId);
  for (std::size_t i = 0; i < target.size(); ++i) lat.labels[2 * i + 1] = target[i];
  auto skip_ok = [&](std::size_t s) { return s >= 2 && lat.labels[s] != kBlankId && lat.labels[s] != lat.labels[s - 2]; };
  auto emit = [&](std::size_t t, std::size_t s) { return lp[t * C + static_cast<std::size_t>(lat.labels[s])]; };

  lat.alpha.assign(T * S, kNegInf);
  lat.alpha[0] = emit(0, 0);
  if (S > 1) lat.alpha[1] = emit(0, 1);
  for (std::size_t t = 1; t < T; ++t) {
    for (std::size_t s = 0; s < S; ++s) {
      double a = lat.alpha[(t - 1) * S + s];
      if (s >= 1) a = log_add(a, lat.alpha[(t - 1) * S + s - 1]);
      if (skip_ok(s)) a = log_add(a, lat.alpha[(t - 1) * S + s - 2]);
      lat.alpha[t * S + s] = a == kNegInf ? kNegInf : a + emit(t, s);
    }
  }
  double ll = lat.alpha[(T - 1) * S + S - 1];
  if (S > 1) ll = log_add(ll, lat.alpha[(T - 1) * S + S - 2]);
  lat.log_likelihood = ll;

  if (with_beta) {
    lat.beta.assign(T * S, kNegInf);
    lat.beta[(T - 1) * S + S - 1] = emit(T - 1, S - 1);
    if (S > 1) lat.beta[(T - 1) * S + S - 2] = emit(T - 1, S - 2);
    for (std::size_t t = T - 1; t-- > 0;) {
      for (std::size_t s = 0; s < S; ++s) {
        double b = lat.beta[(t + 1) * S + s];
        if (s + 1 < S) b = log_add(b, lat.beta[(t + 1) * S + s + 1]);
        if (s + 2 < S && skip_ok(s + 2)) b = log_add(b, lat.beta[(t + 1) * S + s + 2]);
        lat.beta[t * S + s] = b == kNegInf ? kNegInf : b + emit(t, s);
      }
    }
  }
  return lat;
}

}  // namespace

std::size_t ctc_min_frames(std::span<const int> target) {
  std::size_t n = target.size();
  for (std::size_t i = 1; i < target.size(); ++i) n += target[i] == target[i - 1];
  return n;
}

double ctc_neg_log_likelihood(std::span<const double> log_probs, std::size_t frames, std::size_t classes,
                              std::span<const int> target) {
  return -ctc_lattice(log_probs, frames, classes, target, false).log_likelihood;
}

Tensor ctc_loss(const Tensor& log_probs, std::span<const std::size_t> lengths,
                const std::vector<std::vector<int>>& targets) {
  if (log_probs.rank() != 3 || lengths.size() != log_probs.dim(0) || targets.size() != log_probs.dim(0)) {
    throw ShapeError("ctc_loss", shape_str(log_probs.shape()) + " with " + std::to_string(lengths.size()) +
                                     " lengths and " + std::to_string(targets.size()) + " targets");
  }
  const std::size_t B = log_probs.dim(0), T = log_probs.dim(1), C = log_probs.dim(2);
  if (B == 0) throw ShapeError("ctc_loss", "empty batch");
  const auto lp = log_probs.data();
  const bool need_grad = grad_mode_enabled() && log_probs.requires_grad();
  auto grad = std::make_shared<std::vector<double>>(need_grad ? lp.size() : 0, 0.0);
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    if (lengths[b] > T) throw ShapeError("ctc_loss", "length " + std::to_string(lengths[b]) + " exceeds T");
    const auto seq = lp.subspan(b * T * C, lengths[b] * C);
    const auto lat = ctc_lattice(seq, lengths[b], C, targets[b], need_grad);
    if (!std::isfinite(lat.log_likelihood)) {
      throw std::domain_error("ctc_loss: target has zero probability under the given log-probs");
    }
    const double per_token = 1.0 / static_cast<double>(std::max<std::size_t>(1, targets[b].size()));
    total -= lat.log_likelihood * per_token;
    if (!need_grad) continue;
    // d(-log P)/d lp[t, k] = -sum_{s: label k} exp(alpha + beta - lp - log P)
    const std::size_t S = lat.labels.size();
    double* g = grad->data() + b * T * C;
    for (std::size_t t = 0; t < lengths[b]; ++t) {
      for (std::size_t s = 0; s < S; ++s) {
        const double ab = lat.alpha[t * S + s] + lat.beta[t * S + s];
        if (ab == kNegInf) continue;
        const auto k = static_cast<std::size_t>(lat.labels[s]);
        g[t * C + k] -= per_token * std::exp(ab - seq[t * C + k] - lat.log_likelihood);
      }
    }
  }
  const double inv_b = 1.0 / static_cast<double>(B);
  return Tensor::make_result("ctc_loss", {}, {total * inv_b}, {log_probs},
                             [log_probs, grad, inv_b](std::span<const double> g) {
                               if (grad->empty()) return;
                               auto gx = log_probs.grad_accumulator();
                               for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[0] * inv_b * (*grad)[i];
                             });
}

Tensor ce_loss(const Tensor& logits, std::span<const int> targets, int pad_id) {
  if (logits.rank() == 0) throw ShapeError("ce_loss", "scalar logits");
  const std::size_t V = logits.shape().back();
  if (V == 0 || logits.numel() / V != targets.size()) {
    throw ShapeError("ce_loss", shape_str(logits.shape()) + " with " + std::to_string(targets.size()) + " targets");
  }
  return nll_loss(log_softmax(reshape(logits, {targets.size(), V})), targets, pad_id);
}

Tensor contrastive_loss(const Tensor& speech, std::span<const std::size_t> speech_lens, const Tensor& text,
                        std::span<const std::size_t> text_lens, double tau) {
  if (speech.rank() != 3 || text.rank() != 3 || speech.dim(0) != text.dim(0) || speech.dim(2) != text.dim(2)) {
    throw ShapeError("contrastive_loss", shape_str(speech.shape()) + " vs " + shape_str(text.shape()));
  }
  if (!(tau > 0.0)) throw std::invalid_argument("contrastive loss temperature must be positive");
  const std::size_t B = speech.dim(0);
  if (B < 2) throw std::invalid_argument("contrastive loss undefined without negatives");
  const Tensor s = normalize_rows(mean_pool(speech, speech_lens));
  const Tensor t = normalize_rows(mean_pool(text, text_lens));
  const Tensor sim = scale(matmul_nt(s, t), 1.0 / tau);  // [B, B]
  std::vector<std::uint8_t> negatives(B * B, 1);
  std::vector<double> eye(B * B, 0.0);
  for (std::size_t i = 0; i < B; ++i) {
    negatives[i * B + i] = 0;
    eye[i * B + i] = 1.0;
  }
  const Tensor positives = scale(sum(mul(sim, Tensor::from({B, B}, std::move(eye)))), 1.0 / static_cast<double>(B));
  return sub(mean(logsumexp(sim, negatives)), positives);
}

Tensor consistency_loss(std::span<const Tensor> extractor_outs, std::span<const Tensor> attention_outs,
                        std::span<const std::size_t> lengths) {
  if (extractor_outs.size() != attention_outs.size()) {
    throw std::invalid_argument("consistency loss: " + std::to_string(extractor_outs.size()) +
                                " extractor outputs for " + std::to_string(attention_outs.size()) +
                                " attention outputs");
  }
  if (extractor_outs.empty()) throw std::invalid_argument("consistency loss: no layers");
  Tensor total;
  for (std::size_t i = 0; i < extractor_outs.size(); ++i) {
    const Tensor& a = extractor_outs[i];
    const Tensor& b = attention_outs[i];
    if (a.shape() != b.shape() || a.rank() != 3 || a.dim(0) != lengths.size()) {
      throw ShapeError("consistency_loss", "layer " + std::to_string(i) + ": " + shape_str(a.shape()) + " vs " +
                                               shape_str(b.shape()));
    }
    const std::size_t B = a.dim(0), L = a.dim(1), d = a.dim(2);
    std::vector<double> valid(B * L, 0.0);
    for (std::size_t r = 0; r < B; ++r) {
      for (std::size_t t = 0; t < std::min(lengths[r], L); ++t) valid[r * L + t] = 1.0;
    }
    const Tensor diff = sub(layer_norm(a, Tensor{}, Tensor{}), layer_norm(b, Tensor{}, Tensor{}));
    const Tensor term = weighted_row_mean(reshape(square(diff), {B * L, d}), valid);
    total = total.defined() ? add(total, term) : term;
  }
  return scale(total, 1.0 / static_cast<double>(extractor_outs.size()));
}

void LossWeights::validate() const {
  if (asr < 0.0 || mt < 0.0 || cl < 0.0 || consistency < 0.0) {
    throw std::invalid_argument("loss weights must be non-negative");
  }
}

LossBundle total_loss(Tensor l_st, Tensor l_asr, Tensor l_mt, Tensor l_cl, Tensor l_consistency,
                      const LossWeights& weights) {
  weights.validate();
  LossBundle out;
  out.l_st = std::move(l_st);
  out.l_asr = std::move(l_asr);
  out.l_mt = std::move(l_mt);
  out.l_cl = std::move(l_cl);
  out.l_consistency = std::move(l_consistency);
  out.weights = weights;
  auto accumulate = [&out](const Tensor& part, double w) {
    if (!part.defined()) return;
    const Tensor term = w == 1.0 ? part : scale(part, w);
    out.total = out.total.defined() ? add(out.total, term) : term;
  };
  accumulate(out.l_st, 1.0);
  accumulate(out.l_asr, weights.asr);
  accumulate(out.l_mt, weights.mt);
  accumulate(out.l_cl, weights.cl);
  accumulate(out.l_consistency, weights.consistency);
  if (!out.total.defined()) throw std::invalid_argument("total loss: no components");
  return out;
}

LossBundle compute_losses(const ForwardResult& forward, const Symbols& symbols, const LossWeights& weights,
                          bool use_contrastive, bool use_consistency) {
  Tensor st, asr, mt, cl, cons;
  const int pad = symbols.pad();
  auto add_term = [](Tensor& acc, const Tensor& t) { acc = acc.defined() ? add(acc, t) : t; };
  const TextEncoding* speech_enc = nullptr;
  if (auto it = forward.tasks.find(Task::ST); it != forward.tasks.end()) {
    st = ce_loss(it->second.logits, it->second.targets, pad);
    if (it->second.encoding) speech_enc = &*it->second.encoding;
  }
  if (auto it = forward.tasks.find(Task::ASR); it != forward.tasks.end()) {
    const auto& o = it->second;
    if (o.ctc_log_probs.defined()) add_term(asr, ctc_loss(o.ctc_log_probs, o.ctc_lengths, o.ctc_targets));
    if (o.logits.defined()) add_term(asr, ce_loss(o.logits, o.targets, pad));
    if (!speech_enc && o.encoding) speech_enc = &*o.encoding;
  }
  const TextEncoding* text_enc = nullptr;
  if (auto it = forward.tasks.find(Task::MT); it != forward.tasks.end()) {
    mt = ce_loss(it->second.logits, it->second.targets, pad);
    if (it->second.encoding) text_enc = &*it->second.encoding;
  }
  if (use_contrastive && forward.clean_text.defined() && forward.tasks.contains(Task::ST)) {
    const auto& enc = *forward.at(Task::ST).encoding;
    cl = contrastive_loss(enc.input, enc.lengths, forward.clean_text, forward.clean_text_lengths);
  }
  if (use_consistency) {
    for (const TextEncoding* enc : {speech_enc, text_enc}) {
      if (enc && !enc->extractor_outs.empty()) {
        add_term(cons, consistency_loss(enc->extractor_outs, enc->attention_outs, enc->lengths));
      }
    }
  }
  return total_loss(st, asr, mt, cl, cons, weights);
}

}  // namespace mtlab
