#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "kml/errors.hpp"

namespace kml {

using Shape = std::vector<std::size_t>;

// Storage is always double; f32 tensors hold float-representable values and
// their reductions accumulate in float.
enum class Precision : std::uint8_t { f32 = 0, f64 = 1 };

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;

namespace detail {
struct Node;
}

// Maps the gradient w.r.t. a node's output to one gradient per input.
// Backward functions are written in terms of differentiable ops, so running
// them with graph recording on yields a differentiable gradient.
using BackwardFn = std::function<std::vector<Tensor>(const Tensor& grad_output)>;

/// Immutable n-dimensional array with an optional handle into the
/// differentiation graph. Copies are cheap handle copies.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from_values(Shape shape, std::vector<double> values,
                            Precision precision = Precision::f64);
  static Tensor zeros(Shape shape, Precision precision = Precision::f64);
  static Tensor full(Shape shape, double value, Precision precision = Precision::f64);
  static Tensor scalar(double value, Precision precision = Precision::f64);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  std::span<const double> values() const;
  double operator[](std::size_t i) const { return values()[i]; }
  // Value of a single-element tensor.
  double item() const;

  Precision precision() const;
  bool requires_grad() const;
  const char* op() const;

  // Leaf sharing this tensor's storage. detach() never receives gradients;
  // as_parameter() is a fresh graph root that does.
  Tensor detach() const;
  Tensor as_parameter() const;

  bool same_node(const Tensor& other) const { return node_ == other.node_; }
  const detail::Node* node() const { return node_.get(); }

 private:
  friend Tensor make_result(Shape, std::vector<double>, Precision, std::vector<Tensor>,
                            BackwardFn, const char*);
  friend Tensor mark_gradient(const Tensor&, bool);
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  std::shared_ptr<detail::Node> node_;
};

namespace detail {

struct Node {
  Shape shape;
  std::shared_ptr<const std::vector<double>> values;
  Precision precision = Precision::f64;
  bool requires_grad = false;
  // Output of grad(); first-order backward passes stop here.
  bool gradient_output = false;
  // Value depends on a gradient that was recorded with (live) or without
  // (frozen) its own graph.
  bool depends_on_live_gradient = false;
  bool depends_on_frozen_gradient = false;
  const char* op = "leaf";
  std::vector<Tensor> inputs;
  BackwardFn backward;
};

}  // namespace detail

// Graph recording switch (thread-local). While disabled, ops produce leaves.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Builds an op output. Records inputs and backward only when recording is on
// and some input requires grad. f32 is contagious and rounds the values.
Tensor make_result(Shape shape, std::vector<double> values, Precision precision,
                   std::vector<Tensor> inputs, BackwardFn backward, const char* op);

// Wraps a value returned by grad(). live=true keeps it differentiable.
Tensor mark_gradient(const Tensor& g, bool live);

Precision promote(std::span<const Tensor> tensors);

}  // namespace kml
