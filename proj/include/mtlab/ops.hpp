// SPDX-License-Identifier: Apache-2.0
//
// Differentiable primitives. Unless stated otherwise an op treats its input
// as a stack of rows over the last axis.

#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <vector>

#include "mtlab/tensor.hpp"

namespace mtlab {

// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor square(const Tensor& a);
Tensor relu(const Tensor& a);
/// Exact (erf) GELU.
Tensor gelu(const Tensor& a);

/// `x` of shape [..., k] times `w` of shape [k, n] -> [..., n].
Tensor matmul(const Tensor& x, const Tensor& w);
/// `a` [m, k] times `b`[n, k] transposed -> [m, n].
Tensor matmul_nt(const Tensor& a, const Tensor& b);
/// Adds `bias` [n] to every row of `x` [..., n].
Tensor add_bias(const Tensor& x, const Tensor& bias);
/// `x` @ `w` + `bias`.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

Tensor reshape(const Tensor& x, Shape shape);

/// Rows of `table` [V, d] selected by `ids`; result shape is `out_prefix` + [d].
Tensor embedding(const Tensor& table, std::span<const int> ids, Shape out_prefix);

/// Rows of `x` (viewed as [N, d]) at `index`; index -1 yields a zero row.
Tensor gather_rows(const Tensor& x, std::span<const std::int64_t> index, Shape out_prefix);

Tensor softmax(const Tensor& x);
Tensor log_softmax(const Tensor& x);
/// Log-sum-exp over the last axis. `mask`, when non-empty, marks the entries
/// (same size as x) that take part; a row with no entries yields -inf-free 0.
Tensor logsumexp(const Tensor& x, std::span<const std::uint8_t> mask = {});

/// Layer normalization over the last axis with eps 1e-5 inside the square
/// root. `gamma`/`beta` may be undefined for a parameter-free normalization.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta);

inline constexpr double kLayerNormEps = 1e-5;

/// Left padding used by `depthwise_conv1d` for kernel width `k`.
constexpr std::size_t conv_left_pad(std::size_t k) { return k / 2; }

/// Per-channel 1-D convolution over time. `x` [B, T, C], `kernel` [k, C],
/// `bias` [C] (may be undefined). Zero padding keeps length T; even widths
/// pad one more on the left. Positions at or beyond `lengths[b]` are treated
/// as zeros on input and produce zeros on output.
Tensor depthwise_conv1d(const Tensor& x, const Tensor& kernel, const Tensor& bias,
                        std::span<const std::size_t> lengths = {});

/// Mean over the time axis of `x` [B, T, d] restricted to the first
/// `lengths[b]` steps -> [B, d].
Tensor mean_pool(const Tensor& x, std::span<const std::size_t> lengths);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Sum over rows r of weight[r] * sum(x[r, :]) divided by (sum(weight) * d).
Tensor weighted_row_mean(const Tensor& x, std::span<const double> row_weight);

/// Mean negative log-likelihood of `targets` under `log_probs` [N, V],
/// skipping entries equal to `ignore_id`.
Tensor nll_loss(const Tensor& log_probs, std::span<const int> targets, int ignore_id);

/// Each row scaled to unit L2 norm (eps 1e-12 guards the zero row).
Tensor normalize_rows(const Tensor& x);

/// Inverted dropout; identity when p == 0 or grad mode is off.
Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng);

struct AttentionSpec {
  std::size_t heads = 1;
  double scale = 1.0;
  bool causal = false;
  /// Per batch valid key count; empty means every key is valid.
  std::span<const std::size_t> key_lengths = {};
  /// Per (batch, key) validity flags [B * Tk]; combined with key_lengths.
  std::span<const std::uint8_t> key_mask = {};
};

struct AttentionResult {
  Tensor output;
  /// Attention probabilities [B, H, Tq, Tk]; zero on masked keys.
  std::shared_ptr<const std::vector<double>> weights;
  std::size_t batch = 0, heads = 0, queries = 0, keys = 0;
};

/// Multi-head scaled dot-product attention. `q` [B, Tq, H*dk], `k`
/// [B, Tk, H*dk], `v` [B, Tk, H*dv]. A query with no valid key attends to
/// nothing and outputs zeros.
AttentionResult attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionSpec& spec);

}  // namespace mtlab
