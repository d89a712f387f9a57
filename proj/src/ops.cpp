// SPDX-License-Identifier: Apache-2.0

#include "mtlab/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace mtlab {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

void require_same(std::string_view op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(op, shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

std::size_t last_dim(std::string_view op, const Tensor& x) {
  if (x.rank() == 0) throw ShapeError(op, "needs at least one axis, got a scalar");
  return x.shape().back();
}

template <typename F>
Tensor unary(std::string_view op, const Tensor& a, F&& value_and_slope) {
  const auto in = a.data();
  std::vector<double> out(in.size());
  std::vector<double> slope(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    auto [v, s] = value_and_slope(in[i]);
    out[i] = v;
    slope[i] = s;
  }
  return Tensor::make_result(op, a.shape(), std::move(out), {a},
                             [a, slope = std::move(slope)](std::span<const double> g) mutable {
                               auto ga = a.grad_accumulator();
                               for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * slope[i];
                             });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same("add", a, b);
  const auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
  return Tensor::make_result("add", a.shape(), std::move(out), {a, b}, [a, b](std::span<const double> g) mutable {
    if (a.requires_grad()) {
      auto ga = a.grad_accumulator();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto gb = b.grad_accumulator();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same("sub", a, b);
  const auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
  return Tensor::make_result("sub", a.shape(), std::move(out), {a, b}, [a, b](std::span<const double> g) mutable {
    if (a.requires_grad()) {
      auto ga = a.grad_accumulator();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto gb = b.grad_accumulator();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same("mul", a, b);
  const auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
  return Tensor::make_result("mul", a.shape(), std::move(out), {a, b}, [a, b](std::span<const double> g) mutable {
    if (a.requires_grad()) {
      auto ga = a.grad_accumulator();
      const auto y = b.data();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
    }
    if (b.requires_grad()) {
      auto gb = b.grad_accumulator();
      const auto x = a.data();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  const auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * factor;
  return Tensor::make_result("scale", a.shape(), std::move(out), {a}, [a, factor](std::span<const double> g) mutable {
    auto ga = a.grad_accumulator();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
  });
}

Tensor square(const Tensor& a) {
  return unary("square", a, [](double v) { return std::pair{v * v, 2.0 * v}; });
}

Tensor relu(const Tensor& a) {
  return unary("relu", a, [](double v) { return v > 0.0 ? std::pair{v, 1.0} : std::pair{0.0, 0.0}; });
}

Tensor gelu(const Tensor& a) {
  return unary("gelu", a, [](double v) {
    const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
    const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi);
    return std::pair{v * cdf, cdf + v * pdf};
  });
}

Tensor matmul(const Tensor& x, const Tensor& w) {
  const std::size_t k = last_dim("matmul", x);
  if (w.rank() != 2 || w.dim(0) != k) {
    throw ShapeError("matmul", shape_str(x.shape()) + " x " + shape_str(w.shape()));
  }
  const std::size_t n = w.dim(1);
  const std::size_t rows = x.numel() / k;
  Shape out_shape = x.shape();
  out_shape.back() = n;
  std::vector<double> out(rows * n);
  Map(out.data(), rows, n).noalias() = MapC(x.data().data(), rows, k) * MapC(w.data().data(), k, n);
  return Tensor::make_result("matmul", std::move(out_shape), std::move(out), {x, w},
                             [x, w, rows, k, n](std::span<const double> g) mutable {
                               MapC G(g.data(), rows, n);
                               if (x.requires_grad()) {
                                 Map(x.grad_accumulator().data(), rows, k).noalias() +=
                                     G * MapC(w.data().data(), k, n).transpose();
                               }
                               if (w.requires_grad()) {
                                 Map(w.grad_accumulator().data(), k, n).noalias() +=
                                     MapC(x.data().data(), rows, k).transpose() * G;
                               }
                             });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    throw ShapeError("matmul_nt", shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  }
  const std::size_t m = a.dim(0), n = b.dim(0), k = a.dim(1);
  std::vector<double> out(m * n);
  Map(out.data(), m, n).noalias() = MapC(a.data().data(), m, k) * MapC(b.data().data(), n, k).transpose();
  return Tensor::make_result("matmul_nt", {m, n}, std::move(out), {a, b}, [a, b, m, n, k](std::span<const double> g) mutable {
    MapC G(g.data(), m, n);
    if (a.requires_grad()) Map(a.grad_accumulator().data(), m, k).noalias() += G * MapC(b.data().data(), n, k);
    if (b.requires_grad()) {
      Map(b.grad_accumulator().data(), n, k).noalias() += G.transpose() * MapC(a.data().data(), m, k);
    }
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  const std::size_t n = last_dim("add_bias", x);
  if (bias.rank() != 1 || bias.dim(0) != n) {
    throw ShapeError("add_bias", shape_str(x.shape()) + " + " + shape_str(bias.shape()));
  }
  const auto in = x.data(), b = bias.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] + b[i % n];
  return Tensor::make_result("add_bias", x.shape(), std::move(out), {x, bias}, [x, bias, n](std::span<const double> g) mutable {
    if (x.requires_grad()) {
      auto gx = x.grad_accumulator();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (bias.requires_grad()) {
      auto gb = bias.grad_accumulator();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % n] += g[i];
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) { return add_bias(matmul(x, w), bias); }

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape", shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return Tensor::make_result("reshape", std::move(shape), std::move(out), {x}, [x](std::span<const double> g) mutable {
    auto gx = x.grad_accumulator();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Tensor embedding(const Tensor& table, std::span<const int> ids, Shape out_prefix) {
  if (table.rank() != 2) throw ShapeError("embedding", "table must be [V, d], got " + shape_str(table.shape()));
  if (shape_numel(out_prefix) != ids.size()) {
    throw ShapeError("embedding", std::to_string(ids.size()) + " ids for prefix " + shape_str(out_prefix));
  }
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<int> idx(ids.begin(), ids.end());
  for (int id : idx) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw ShapeError("embedding", "id " + std::to_string(id) + " outside vocabulary of " + std::to_string(vocab));
    }
  }
  const auto t = table.data();
  std::vector<double> out(idx.size() * d);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    std::copy_n(t.begin() + static_cast<std::ptrdiff_t>(idx[r] * d), d, out.begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  Shape shape = std::move(out_prefix);
  shape.push_back(d);
  return Tensor::make_result("embedding", std::move(shape), std::move(out), {table},
                             [table, idx = std::move(idx), d](std::span<const double> g) mutable {
                               auto gt = table.grad_accumulator();
                               for (std::size_t r = 0; r < idx.size(); ++r) {
                                 for (std::size_t c = 0; c < d; ++c) gt[idx[r] * d + c] += g[r * d + c];
                               }
                             });
}

Tensor gather_rows(const Tensor& x, std::span<const std::int64_t> index, Shape out_prefix) {
  const std::size_t d = last_dim("gather_rows", x);
  const std::size_t rows = x.numel() / d;
  if (shape_numel(out_prefix) != index.size()) {
    throw ShapeError("gather_rows", std::to_string(index.size()) + " indices for prefix " + shape_str(out_prefix));
  }
  std::vector<std::int64_t> idx(index.begin(), index.end());
  for (auto i : idx) {
    if (i < -1 || i >= static_cast<std::int64_t>(rows)) {
      throw ShapeError("gather_rows", "row " + std::to_string(i) + " outside " + shape_str(x.shape()));
    }
  }
  const auto in = x.data();
  std::vector<double> out(idx.size() * d, 0.0);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= 0) {
      std::copy_n(in.begin() + idx[r] * static_cast<std::ptrdiff_t>(d), d, out.begin() + static_cast<std::ptrdiff_t>(r * d));
    }
  }
  Shape shape = std::move(out_prefix);
  shape.push_back(d);
  return Tensor::make_result("gather_rows", std::move(shape), std::move(out), {x},
                             [x, idx = std::move(idx), d](std::span<const double> g) mutable {
                               auto gx = x.grad_accumulator();
                               for (std::size_t r = 0; r < idx.size(); ++r) {
                                 if (idx[r] < 0) continue;
                                 const std::size_t base = static_cast<std::size_t>(idx[r]) * d;
                                 for (std::size_t c = 0; c < d; ++c) gx[base + c] += g[r * d + c];
                               }
                             });
}

Tensor softmax(const Tensor& x) {
  const std::size_t n = last_dim("softmax", x);
  const auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t r = 0; r < in.size() / n; ++r) {
    const double* row = in.data() + r * n;
    double* o = out.data() + r * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t c = 0; c < n; ++c) z += (o[c] = std::exp(row[c] - mx));
    for (std::size_t c = 0; c < n; ++c) o[c] /= z;
  }
  auto y = std::make_shared<std::vector<double>>(out);
  return Tensor::make_result("softmax", x.shape(), std::move(out), {x}, [x, y, n](std::span<const double> g) mutable {
    auto gx = x.grad_accumulator();
    for (std::size_t r = 0; r < g.size() / n; ++r) {
      const double* p = y->data() + r * n;
      const double* gr = g.data() + r * n;
      double dot = 0.0;
      for (std::size_t c = 0; c < n; ++c) dot += gr[c] * p[c];
      for (std::size_t c = 0; c < n; ++c) gx[r * n + c] += p[c] * (gr[c] - dot);
    }
  });
}

Tensor log_softmax(const Tensor& x) {
  const std::size_t n = last_dim("log_softmax", x);
  const auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t r = 0; r < in.size() / n; ++r) {
    const double* row = in.data() + r * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t c = 0; c < n; ++c) z += std::exp(row[c] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = row[c] - lz;
  }
  auto y = std::make_shared<std::vector<double>>(out);
  return Tensor::make_result("log_softmax", x.shape(), std::move(out), {x}, [x, y, n](std::span<const double> g) mutable {
    auto gx = x.grad_accumulator();
    for (std::size_t r = 0; r < g.size() / n; ++r) {
      const double* lp = y->data() + r * n;
      const double* gr = g.data() + r * n;
      double total = 0.0;
      for (std::size_t c = 0; c < n; ++c) total += gr[c];
      for (std::size_t c = 0; c < n; ++c) gx[r * n + c] += gr[c] - std::exp(lp[c]) * total;
    }
  });
}

Tensor logsumexp(const Tensor& x, std::span<const std::uint8_t> mask) {
  const std::size_t n = last_dim("logsumexp", x);
  if (!mask.empty() && mask.size() != x.numel()) {
    throw ShapeError("logsumexp", "mask of " + std::to_string(mask.size()) + " for " + shape_str(x.shape()));
  }
  const auto in = x.data();
  const std::size_t rows = in.size() / n;
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  if (m.empty()) m.assign(in.size(), 1);
  std::vector<double> out(rows, 0.0);
  auto weights = std::make_shared<std::vector<double>>(in.size(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < n; ++c) {
      if (m[r * n + c]) mx = std::max(mx, in[r * n + c]);
    }
    if (!std::isfinite(mx)) continue;
    double z = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      if (m[r * n + c]) z += ((*weights)[r * n + c] = std::exp(in[r * n + c] - mx));
    }
    for (std::size_t c = 0; c < n; ++c) (*weights)[r * n + c] /= z;
    out[r] = mx + std::log(z);
  }
  Shape shape(x.shape().begin(), x.shape().end() - 1);
  return Tensor::make_result("logsumexp", std::move(shape), std::move(out), {x}, [x, weights, n](std::span<const double> g) mutable {
    auto gx = x.grad_accumulator();
    for (std::size_t r = 0; r < g.size(); ++r) {
      for (std::size_t c = 0; c < n; ++c) gx[r * n + c] += g[r] * (*weights)[r * n + c];
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  const std::size_t n = last_dim("layer_norm", x);
  if (gamma.defined() != beta.defined()) throw ShapeError("layer_norm", "gamma and beta must be given together");
  if (gamma.defined() && (gamma.shape() != Shape{n} || beta.shape() != Shape{n})) {
    throw ShapeError("layer_norm", shape_str(x.shape()) + " with affine " + shape_str(gamma.shape()) + "/" +
                                       shape_str(beta.shape()));
  }
  const auto in = x.data();
  const std::size_t rows = in.size() / n;
  auto xhat = std::make_shared<std::vector<double>>(in.size());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(in.size());
  const bool affine = gamma.defined();
  const auto gm = affine ? gamma.data() : std::span<const double>{};
  const auto bt = affine ? beta.data() : std::span<const double>{};
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * n;
    double mu = 0.0;
    for (std::size_t c = 0; c < n; ++c) mu += row[c];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(n);
    const double rs = 1.0 / std::sqrt(var + kLayerNormEps);
    (*rstd)[r] = rs;
    for (std::size_t c = 0; c < n; ++c) {
      const double h = (row[c] - mu) * rs;
      (*xhat)[r * n + c] = h;
      out[r * n + c] = affine ? h * gm[c] + bt[c] : h;
    }
  }
  std::vector<Tensor> parents{x};
  if (affine) {
    parents.push_back(gamma);
    parents.push_back(beta);
  }
  return Tensor::make_result(
      "layer_norm", x.shape(), std::move(out), std::move(parents),
      [x, gamma, beta, xhat, rstd, n, affine](std::span<const double> g) mutable {
        const std::size_t rows = g.size() / n;
        if (affine && gamma.requires_grad()) {
          auto gg = gamma.grad_accumulator();
          auto gb = beta.grad_accumulator();
          for (std::size_t i = 0; i < g.size(); ++i) {
            gg[i % n] += g[i] * (*xhat)[i];
            gb[i % n] += g[i];
          }
        }
        if (!x.requires_grad()) return;
        auto gx = x.grad_accumulator();
        const auto gm = affine ? gamma.data() : std::span<const double>{};
        std::vector<double> gh(n);
        for (std::size_t r = 0; r < rows; ++r) {
          double mean_gh = 0.0, mean_ghx = 0.0;
          for (std::size_t c = 0; c < n; ++c) {
            gh[c] = g[r * n + c] * (affine ? gm[c] : 1.0);
            mean_gh += gh[c];
            mean_ghx += gh[c] * (*xhat)[r * n + c];
          }
          mean_gh /= static_cast<double>(n);
          mean_ghx /= static_cast<double>(n);
          for (std::size_t c = 0; c < n; ++c) {
            gx[r * n + c] += (*rstd)[r] * (gh[c] - mean_gh - (*xhat)[r * n + c] * mean_ghx);
          }
        }
      });
}

Tensor depthwise_conv1d(const Tensor& x, const Tensor& kernel, const Tensor& bias,
                        std::span<const std::size_t> lengths) {
  if (x.rank() != 3 || kernel.rank() != 2 || kernel.dim(1) != x.dim(2) || kernel.dim(0) == 0) {
    throw ShapeError("depthwise_conv1d", shape_str(x.shape()) + " * " + shape_str(kernel.shape()));
  }
  const std::size_t B = x.dim(0), T = x.dim(1), C = x.dim(2), K = kernel.dim(0);
  if (bias.defined() && bias.shape() != Shape{C}) {
    throw ShapeError("depthwise_conv1d", "bias " + shape_str(bias.shape()) + " for " + std::to_string(C) + " channels");
  }
  if (!lengths.empty() && lengths.size() != B) {
    throw ShapeError("depthwise_conv1d", std::to_string(lengths.size()) + " lengths for batch " + std::to_string(B));
  }
  std::vector<std::size_t> lens(B, T);
  for (std::size_t b = 0; b < lengths.size(); ++b) lens[b] = std::min(lengths[b], T);
  const auto left = static_cast<std::ptrdiff_t>(conv_left_pad(K));
  const auto in = x.data(), w = kernel.data();
  std::vector<double> out(in.size(), 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    const auto len = static_cast<std::ptrdiff_t>(lens[b]);
    for (std::ptrdiff_t t = 0; t < len; ++t) {
      double* o = out.data() + (b * T + static_cast<std::size_t>(t)) * C;
      if (bias.defined()) {
        const auto bs = bias.data();
        for (std::size_t c = 0; c < C; ++c) o[c] = bs[c];
      }
      for (std::size_t u = 0; u < K; ++u) {
        const std::ptrdiff_t src = t - left + static_cast<std::ptrdiff_t>(u);
        if (src < 0 || src >= len) continue;
        const double* xi = in.data() + (b * T + static_cast<std::size_t>(src)) * C;
        const double* wu = w.data() + u * C;
        for (std::size_t c = 0; c < C; ++c) o[c] += wu[c] * xi[c];
      }
    }
  }
  std::vector<Tensor> parents{x, kernel};
  if (bias.defined()) parents.push_back(bias);
  return Tensor::make_result(
      "depthwise_conv1d", x.shape(), std::move(out), std::move(parents),
      [x, kernel, bias, lens, B, T, C, K, left](std::span<const double> g) mutable {
        const auto in = x.data(), w = kernel.data();
        std::span<double> gx = x.requires_grad() ? x.grad_accumulator() : std::span<double>{};
        std::span<double> gw = kernel.requires_grad() ? kernel.grad_accumulator() : std::span<double>{};
        std::span<double> gb = bias.defined() && bias.requires_grad() ? bias.grad_accumulator() : std::span<double>{};
        for (std::size_t b = 0; b < B; ++b) {
          const auto len = static_cast<std::ptrdiff_t>(lens[b]);
          for (std::ptrdiff_t t = 0; t < len; ++t) {
            const double* go = g.data() + (b * T + static_cast<std::size_t>(t)) * C;
            if (!gb.empty()) {
              for (std::size_t c = 0; c < C; ++c) gb[c] += go[c];
            }
            for (std::size_t u = 0; u < K; ++u) {
              const std::ptrdiff_t src = t - left + static_cast<std::ptrdiff_t>(u);
              if (src < 0 || src >= len) continue;
              const std::size_t base = (b * T + static_cast<std::size_t>(src)) * C;
              if (!gx.empty()) {
                for (std::size_t c = 0; c < C; ++c) gx[base + c] += go[c] * w[u * C + c];
              }
              if (!gw.empty()) {
                for (std::size_t c = 0; c < C; ++c) gw[u * C + c] += go[c] * in[base + c];
              }
            }
          }
        }
      });
}

Tensor mean_pool(const Tensor& x, std::span<const std::size_t> lengths) {
  if (x.rank() != 3 || lengths.size() != x.dim(0)) {
    throw ShapeError("mean_pool", shape_str(x.shape()) + " with " + std::to_string(lengths.size()) + " lengths");
  }
  const std::size_t B = x.dim(0), T = x.dim(1), d = x.dim(2);
  std::vector<std::size_t> lens(lengths.begin(), lengths.end());
  for (auto l : lens) {
    if (l == 0 || l > T) throw ShapeError("mean_pool", "length " + std::to_string(l) + " outside [1, " + std::to_string(T) + "]");
  }
  const auto in = x.data();
  std::vector<double> out(B * d, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < lens[b]; ++t) {
      for (std::size_t c = 0; c < d; ++c) out[b * d + c] += in[(b * T + t) * d + c];
    }
    for (std::size_t c = 0; c < d; ++c) out[b * d + c] /= static_cast<double>(lens[b]);
  }
  return Tensor::make_result("mean_pool", {B, d}, std::move(out), {x}, [x, lens, T, d](std::span<const double> g) mutable {
    auto gx = x.grad_accumulator();
    for (std::size_t b = 0; b < lens.size(); ++b) {
      const double inv = 1.0 / static_cast<double>(lens[b]);
      for (std::size_t t = 0; t < lens[b]; ++t) {
        for (std::size_t c = 0; c < d; ++c) gx[(b * T + t) * d + c] += g[b * d + c] * inv;
      }
    }
  });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return Tensor::make_result("sum", {}, {s}, {x}, [x](std::span<const double> g) mutable {
    auto gx = x.grad_accumulator();
    for (auto& v : gx) v += g[0];
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean", "empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor weighted_row_mean(const Tensor& x, std::span<const double> row_weight) {
  const std::size_t d = last_dim("weighted_row_mean", x);
  const std::size_t rows = x.numel() / d;
  if (row_weight.size() != rows) {
    throw ShapeError("weighted_row_mean", std::to_string(row_weight.size()) + " weights for " + shape_str(x.shape()));
  }
  double wsum = 0.0;
  for (double w : row_weight) wsum += w;
  if (wsum <= 0.0) throw ShapeError("weighted_row_mean", "row weights sum to zero");
  const double denom = wsum * static_cast<double>(d);
  const auto in = x.data();
  double s = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (row_weight[r] == 0.0) continue;
    double rs = 0.0;
    for (std::size_t c = 0; c < d; ++c) rs += in[r * d + c];
    s += row_weight[r] * rs;
  }
  std::vector<double> w(row_weight.begin(), row_weight.end());
  return Tensor::make_result("weighted_row_mean", {}, {s / denom}, {x},
                             [x, w = std::move(w), d, denom](std::span<const double> g) mutable {
                               auto gx = x.grad_accumulator();
                               for (std::size_t r = 0; r < w.size(); ++r) {
                                 const double f = g[0] * w[r] / denom;
                                 for (std::size_t c = 0; c < d; ++c) gx[r * d + c] += f;
                               }
                             });
}

Tensor nll_loss(const Tensor& log_probs, std::span<const int> targets, int ignore_id) {
  const std::size_t V = last_dim("nll_loss", log_probs);
  const std::size_t rows = log_probs.numel() / V;
  if (targets.size() != rows) {
    throw ShapeError("nll_loss", std::to_string(targets.size()) + " targets for " + shape_str(log_probs.shape()));
  }
  std::vector<int> tg(targets.begin(), targets.end());
  std::size_t count = 0;
  double total = 0.0;
  const auto lp = log_probs.data();
  for (std::size_t r = 0; r < rows; ++r) {
    if (tg[r] == ignore_id) continue;
    if (tg[r] < 0 || static_cast<std::size_t>(tg[r]) >= V) {
      throw ShapeError("nll_loss", "target " + std::to_string(tg[r]) + " outside " + std::to_string(V) + " classes");
    }
    total -= lp[r * V + static_cast<std::size_t>(tg[r])];
    ++count;
  }
  if (count == 0) throw std::invalid_argument("nll_loss: every target position is padding");
  const double inv = 1.0 / static_cast<double>(count);
  return Tensor::make_result("nll_loss", {}, {total * inv}, {log_probs},
                             [log_probs, tg = std::move(tg), V, ignore_id, inv](std::span<const double> g) mutable {
                               auto gl = log_probs.grad_accumulator();
                               for (std::size_t r = 0; r < tg.size(); ++r) {
                                 if (tg[r] != ignore_id) gl[r * V + static_cast<std::size_t>(tg[r])] -= g[0] * inv;
                               }
                             });
}

Tensor normalize_rows(const Tensor& x) {
  const std::size_t d = last_dim("normalize_rows", x);
  const auto in = x.data();
  const std::size_t rows = in.size() / d;
  auto norms = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(in.size());
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += in[r * d + c] * in[r * d + c];
    const double nr = std::max(std::sqrt(s), 1e-12);
    (*norms)[r] = nr;
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = in[r * d + c] / nr;
  }
  auto y = std::make_shared<std::vector<double>>(out);
  return Tensor::make_result("normalize_rows", x.shape(), std::move(out), {x}, [x, y, norms, d](std::span<const double> g) mutable {
    auto gx = x.grad_accumulator();
    for (std::size_t r = 0; r < norms->size(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < d; ++c) dot += g[r * d + c] * (*y)[r * d + c];
      for (std::size_t c = 0; c < d; ++c) gx[r * d + c] += (g[r * d + c] - (*y)[r * d + c] * dot) / (*norms)[r];
    }
  });
}

Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: p must lie in [0, 1)");
  if (p == 0.0 || !grad_mode_enabled()) return x;
  std::bernoulli_distribution keep(1.0 - p);
  const double s = 1.0 / (1.0 - p);
  std::vector<double> mask(x.numel());
  for (auto& m : mask) m = keep(rng) ? s : 0.0;
  const auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] * mask[i];
  return Tensor::make_result("dropout", x.shape(), std::move(out), {x}, [x, mask = std::move(mask)](std::span<const double> g) mutable {
    auto gx = x.grad_accumulator();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
  });
}

AttentionResult attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionSpec& spec) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3 || q.dim(0) != k.dim(0) || k.dim(0) != v.dim(0) ||
      k.dim(1) != v.dim(1) || q.dim(2) != k.dim(2)) {
    throw ShapeError("attention", "q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " + shape_str(v.shape()));
  }
  const std::size_t B = q.dim(0), Tq = q.dim(1), Tk = k.dim(1), H = spec.heads;
  if (H == 0 || q.dim(2) % H != 0 || v.dim(2) % H != 0) {
    throw ShapeError("attention", std::to_string(H) + " heads do not divide q/v widths");
  }
  if (spec.causal && Tq != Tk) throw ShapeError("attention", "causal attention needs Tq == Tk");
  if (!spec.key_lengths.empty() && spec.key_lengths.size() != B) {
    throw ShapeError("attention", std::to_string(spec.key_lengths.size()) + " key lengths for batch " + std::to_string(B));
  }
  if (!spec.key_mask.empty() && spec.key_mask.size() != B * Tk) {
    throw ShapeError("attention", "key mask of " + std::to_string(spec.key_mask.size()) + " for [" + std::to_string(B) +
                                      "," + std::to_string(Tk) + "]");
  }
  const std::size_t Dq = q.dim(2), Dv = v.dim(2), dk = Dq / H, dv = Dv / H;
  std::vector<std::uint8_t> valid(B * Tk, 1);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t j = 0; j < Tk; ++j) {
      bool ok = spec.key_lengths.empty() || j < spec.key_lengths[b];
      if (!spec.key_mask.empty()) ok = ok && spec.key_mask[b * Tk + j];
      valid[b * Tk + j] = ok;
    }
  }
  const auto Q = q.data(), K = k.data(), V = v.data();
  auto P = std::make_shared<std::vector<double>>(B * H * Tq * Tk, 0.0);
  std::vector<double> out(B * Tq * Dv, 0.0);
  const double sc = spec.scale;
  const bool causal = spec.causal;
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t i = 0; i < Tq; ++i) {
        double* p = P->data() + ((b * H + h) * Tq + i) * Tk;
        const double* qi = Q.data() + (b * Tq + i) * Dq + h * dk;
        const std::size_t jmax = causal ? i + 1 : Tk;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < jmax; ++j) {
          if (!valid[b * Tk + j]) continue;
          const double* kj = K.data() + (b * Tk + j) * Dq + h * dk;
          double s = 0.0;
          for (std::size_t c = 0; c < dk; ++c) s += qi[c] * kj[c];
          p[j] = s * sc;
          mx = std::max(mx, p[j]);
        }
        if (!std::isfinite(mx)) continue;
        double z = 0.0;
        for (std::size_t j = 0; j < jmax; ++j) {
          if (valid[b * Tk + j]) z += (p[j] = std::exp(p[j] - mx));
        }
        double* o = out.data() + (b * Tq + i) * Dv + h * dv;
        for (std::size_t j = 0; j < jmax; ++j) {
          if (!valid[b * Tk + j]) continue;
          p[j] /= z;
          const double* vj = V.data() + (b * Tk + j) * Dv + h * dv;
          for (std::size_t c = 0; c < dv; ++c) o[c] += p[j] * vj[c];
        }
      }
    }
  }
  AttentionResult result;
  result.batch = B;
  result.heads = H;
  result.queries = Tq;
  result.keys = Tk;
  result.weights = P;
  result.output = Tensor::make_result(
      "attention", {B, Tq, Dv}, std::move(out), {q, k, v},
      [q, k, v, P, B, H, Tq, Tk, Dq, Dv, dk, dv, sc](std::span<const double> g) mutable {
        const auto Q = q.data(), K = k.data(), V = v.data();
        std::span<double> gq = q.requires_grad() ? q.grad_accumulator() : std::span<double>{};
        std::span<double> gk = k.requires_grad() ? k.grad_accumulator() : std::span<double>{};
        std::span<double> gv = v.requires_grad() ? v.grad_accumulator() : std::span<double>{};
        std::vector<double> dp(Tk);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t i = 0; i < Tq; ++i) {
              const double* p = P->data() + ((b * H + h) * Tq + i) * Tk;
              const double* go = g.data() + (b * Tq + i) * Dv + h * dv;
              double dot = 0.0;
              for (std::size_t j = 0; j < Tk; ++j) {
                if (p[j] == 0.0) {
                  dp[j] = 0.0;
                  continue;
                }
                const double* vj = V.data() + (b * Tk + j) * Dv + h * dv;
                double s = 0.0;
                for (std::size_t c = 0; c < dv; ++c) s += go[c] * vj[c];
                dp[j] = s;
                dot += p[j] * s;
                if (!gv.empty()) {
                  double* gvj = gv.data() + (b * Tk + j) * Dv + h * dv;
                  for (std::size_t c = 0; c < dv; ++c) gvj[c] += p[j] * go[c];
                }
              }
              const double* qi = Q.data() + (b * Tq + i) * Dq + h * dk;
              double* gqi = gq.empty() ? nullptr : gq.data() + (b * Tq + i) * Dq + h * dk;
              for (std::size_t j = 0; j < Tk; ++j) {
                if (p[j] == 0.0) continue;
                const double ds = p[j] * (dp[j] - dot) * sc;
                const double* kj = K.data() + (b * Tk + j) * Dq + h * dk;
                if (gqi) {
                  for (std::size_t c = 0; c < dk; ++c) gqi[c] += ds * kj[c];
                }
                if (!gk.empty()) {
                  double* gkj = gk.data() + (b * Tk + j) * Dq + h * dk;
                  for (std::size_t c = 0; c < dk; ++c) gkj[c] += ds * qi[c];
                }
              }
            }
          }
        }
      });
  return result;
}

}  // namespace mtlab
