// SPDX-License-Identifier: Apache-2.0
//
// Dense float64 tensors with define-by-run reverse-mode differentiation.

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mtlab {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Raised by a primitive when its operand shapes are incompatible.
class ShapeError : public std::invalid_argument {
 public:
  ShapeError(std::string_view primitive, const std::string& detail);
  const std::string& primitive() const { return primitive_; }

 private:
  std::string primitive_;
};

/// Misuse of the autodiff graph (non-scalar backward, consumed graph, ...).
class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

namespace detail {
struct Node;
}

class Tensor;

/// Receives the gradient of the op output; accumulates into the parents.
using BackwardFn = std::function<void(std::span<const double> grad_out)>;

/// A handle to a node of the autodiff graph. Copies share the node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const double> data() const;
  /// Writable storage; intended for parameters and test perturbations only.
  std::span<double> mutable_data();
  double item() const;

  bool requires_grad() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  /// Gradient storage, allocated as zeros on first use.
  std::span<double> grad_accumulator() const;
  /// Drops the gradient buffer (the tensor then reports no gradient).
  void clear_grad() const;

  /// Reverse-mode sweep from this scalar. The graph is released afterwards.
  void backward();

  /// Wraps an op result. When any parent requires grad the result records
  /// `backward_fn`; otherwise the result is a constant.
  static Tensor make_result(std::string_view op, Shape shape, std::vector<double> data,
                            std::vector<Tensor> parents, BackwardFn backward_fn);

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

/// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_mode_enabled();

}  // namespace mtlab
