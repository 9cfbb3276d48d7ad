#pragma once

#include <span>
#include <vector>

#include "kml/tensor.hpp"

namespace kml {

/// Reverse topological record of the graph below a root tensor.
///
/// Each node that requires grad appears exactly once. With
/// stop_at_gradients set, outputs of earlier grad() calls are treated as
/// constants, which is how first-order meta-gradients are taken.
class GradTape {
 public:
  explicit GradTape(const Tensor& root, bool stop_at_gradients = false);

  std::size_t size() const { return order_.size(); }
  // Nodes from the root downwards; a node precedes all of its inputs.
  std::span<const detail::Node* const> order() const { return order_; }

  // Seeds the root with ones and accumulates. With create_graph the backward
  // pass is itself recorded so the results can be differentiated again.
  std::vector<Tensor> backward(std::span<const Tensor> wrt, bool create_graph) const;

 private:
  Tensor root_;
  bool stop_at_gradients_;
  std::vector<const detail::Node*> order_;
};

struct GradOptions {
  bool create_graph = false;
};

/// d(loss)/d(w) for each w. Unreachable or detached entries get zeros.
std::vector<Tensor> grad(const Tensor& loss, std::span<const Tensor> wrt, GradOptions options = {});
Tensor grad(const Tensor& loss, const Tensor& wrt, GradOptions options = {});

/// Gradient of a loss built through differentiable inner gradient steps.
///
/// first_order=false differentiates through the inner gradients and throws
/// ConfigError if any of them were recorded without create_graph.
/// first_order=true treats every inner gradient as a constant.
std::vector<Tensor> grad2(const Tensor& meta_loss, std::span<const Tensor> wrt, bool first_order);

}  // namespace kml
