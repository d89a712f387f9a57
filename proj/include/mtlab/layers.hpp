// SPDX-License-Identifier: Apache-2.0
//
// Parameterized building blocks shared by the model and the shrinker.

#pragma once

#include <random>
#include <span>
#include <string>
#include <vector>

#include "mtlab/ops.hpp"
#include "mtlab/params.hpp"

namespace mtlab {

/// Seeded parameter factory; creation order fixes every initial value.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  Tensor xavier(std::size_t fan_in, std::size_t fan_out);
  Tensor uniform(Shape shape, double bound);
  Tensor normal(Shape shape, double stddev);
  Tensor constant(Shape shape, double value);

 private:
  std::mt19937_64 rng_;
};

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  static Linear create(Initializer& init, std::size_t in, std::size_t out);
  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;
};

struct Norm {
  Tensor gamma;
  Tensor beta;

  static Norm create(Initializer& init, std::size_t dim);
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;
};

/// Two-layer GELU feed-forward network without normalization or residual.
struct FeedForward {
  Linear fc1;
  Linear fc2;

  static FeedForward create(Initializer& init, std::size_t dim, std::size_t hidden);
  Tensor operator()(const Tensor& x) const { return fc2(gelu(fc1(x))); }
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;
};

/// Attention weights captured from one attention call plus the lengths
/// needed to ignore padding.
struct AttentionMap {
  std::shared_ptr<const std::vector<double>> weights;  // [B, H, Tq, Tk]
  std::size_t batch = 0, heads = 0, queries = 0, keys = 0;
  std::vector<std::size_t> query_lengths;
  std::vector<std::size_t> key_lengths;

  double at(std::size_t b, std::size_t h, std::size_t i, std::size_t j) const {
    return (*weights)[((b * heads + h) * queries + i) * keys + j];
  }
};

/// Pre-norm multi-head attention sublayer: o(attn(q(LN x), k(mem), v(mem))).
struct AttentionBlock {
  Norm norm;
  Linear q, k, v, o;
  std::size_t heads = 1;

  static AttentionBlock create(Initializer& init, std::size_t dim, std::size_t heads);
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;

  /// Self-attention when `memory` is undefined. Returns the sublayer output
  /// (before the residual add).
  Tensor operator()(const Tensor& x, std::span<const std::size_t> query_lengths, const Tensor& memory,
                    std::span<const std::size_t> key_lengths, bool causal, AttentionMap* record = nullptr) const;
};

/// Pre-norm feed-forward sublayer: FFN(LN x).
struct FeedForwardBlock {
  Norm norm;
  FeedForward ffn;

  static FeedForwardBlock create(Initializer& init, std::size_t dim, std::size_t hidden);
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;
  Tensor operator()(const Tensor& x) const { return ffn(norm(x)); }
};

/// Sinusoidal position table [length, dim] broadcast over a batch.
Tensor sinusoidal_positions(std::size_t batch, std::size_t length, std::size_t dim);

}  // namespace mtlab
