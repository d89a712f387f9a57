// SPDX-License-Identifier: Apache-2.0

#include "mtlab/layers.hpp"

#include <cmath>

namespace mtlab {

Tensor Initializer::xavier(std::size_t fan_in, std::size_t fan_out) {
  return uniform({fan_in, fan_out}, std::sqrt(6.0 / static_cast<double>(fan_in + fan_out)));
}

Tensor Initializer::uniform(Shape shape, double bound) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng_);
  return Tensor::from(std::move(shape), std::move(v), true);
}

Tensor Initializer::normal(Shape shape, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng_);
  return Tensor::from(std::move(shape), std::move(v), true);
}

Tensor Initializer::constant(Shape shape, double value) { return Tensor::full(std::move(shape), value, true); }

Linear Linear::create(Initializer& init, std::size_t in, std::size_t out) {
  return {init.xavier(in, out), init.constant({out}, 0.0)};
}

void Linear::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

Norm Norm::create(Initializer& init, std::size_t dim) { return {init.constant({dim}, 1.0), init.constant({dim}, 0.0)}; }

void Norm::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
  out.push_back({prefix + ".gamma", gamma});
  out.push_back({prefix + ".beta", beta});
}

FeedForward FeedForward::create(Initializer& init, std::size_t dim, std::size_t hidden) {
  auto fc1 = Linear::create(init, dim, hidden);
  auto fc2 = Linear::create(init, hidden, dim);
  return {std::move(fc1), std::move(fc2)};
}

void FeedForward::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
  fc1.collect(prefix + ".fc1", out);
  fc2.collect(prefix + ".fc2", out);
}

AttentionBlock AttentionBlock::create(Initializer& init, std::size_t dim, std::size_t heads) {
  AttentionBlock a;
  a.norm = Norm::create(init, dim);
  a.q = Linear::create(init, dim, dim);
  a.k = Linear::create(init, dim, dim);
  a.v = Linear::create(init, dim, dim);
  a.o = Linear::create(init, dim, dim);
  a.heads = heads;
  return a;
}

void AttentionBlock::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
  norm.collect(prefix + ".norm", out);
  q.collect(prefix + ".q", out);
  k.collect(prefix + ".k", out);
  v.collect(prefix + ".v", out);
  o.collect(prefix + ".o", out);
}

Tensor AttentionBlock::operator()(const Tensor& x, std::span<const std::size_t> query_lengths, const Tensor& memory,
                                  std::span<const std::size_t> key_lengths, bool causal, AttentionMap* record) const {
  const Tensor h = norm(x);
  const Tensor& src = memory.defined() ? memory : h;
  const std::size_t dim = x.dim(2);
  AttentionSpec spec;
  spec.heads = heads;
  spec.scale = 1.0 / std::sqrt(static_cast<double>(dim / heads));
  spec.causal = causal;
  spec.key_lengths = key_lengths;
  auto r = attention(q(h), k(src), v(src), spec);
  if (record) {
    record->weights = r.weights;
    record->batch = r.batch;
    record->heads = r.heads;
    record->queries = r.queries;
    record->keys = r.keys;
    record->query_lengths.assign(query_lengths.begin(), query_lengths.end());
    record->key_lengths.assign(key_lengths.begin(), key_lengths.end());
  }
  return o(r.output);
}

FeedForwardBlock FeedForwardBlock::create(Initializer& init, std::size_t dim, std::size_t hidden) {
  auto norm = Norm::create(init, dim);
  auto ffn = FeedForward::create(init, dim, hidden);
  return {std::move(norm), std::move(ffn)};
}

void FeedForwardBlock::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
  norm.collect(prefix + ".norm", out);
  ffn.collect(prefix + ".ffn", out);
}

Tensor sinusoidal_positions(std::size_t batch, std::size_t length, std::size_t dim) {
  std::vector<double> table(length * dim);
  for (std::size_t t = 0; t < length; ++t) {
    for (std::size_t i = 0; i < dim; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(dim));
      table[t * dim + i] = std::sin(static_cast<double>(t) * freq);
      if (i + 1 < dim) table[t * dim + i + 1] = std::cos(static_cast<double>(t) * freq);
    }
  }
  std::vector<double> out;
  out.reserve(batch * table.size());
  for (std::size_t b = 0; b < batch; ++b) out.insert(out.end(), table.begin(), table.end());
  return Tensor::from({batch, length, dim}, std::move(out));
}

}  // namespace mtlab
