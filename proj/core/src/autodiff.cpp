#include "kml/autodiff.hpp"

#include <optional>
#include <unordered_map>
#include <unordered_set>

#include "kml/ops.hpp"

namespace kml {

GradTape::GradTape(const Tensor& root, bool stop_at_gradients)
    : root_(root), stop_at_gradients_(stop_at_gradients) {
  require(root.defined(), "GradTape: undefined root");
  if (!root.requires_grad()) return;

  // Iterative post-order DFS, reversed into a topological order.
  std::unordered_set<const detail::Node*> visited;
  std::vector<std::pair<const detail::Node*, std::size_t>> stack;
  std::vector<const detail::Node*> post;
  stack.emplace_back(root.node(), 0);
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    const bool leaf_here = stop_at_gradients_ && node->gradient_output;
    if (!leaf_here && next < node->inputs.size()) {
      const detail::Node* child = node->inputs[next++].node();
      if (child != nullptr && child->requires_grad && visited.insert(child).second)
        stack.emplace_back(child, 0);
      continue;
    }
    post.push_back(node);
    stack.pop_back();
  }
  order_.assign(post.rbegin(), post.rend());
}

std::vector<Tensor> GradTape::backward(std::span<const Tensor> wrt, bool create_graph) const {
  std::unordered_map<const detail::Node*, Tensor> acc;
  std::unordered_set<const detail::Node*> keep;
  for (const Tensor& w : wrt)
    if (w.defined()) keep.insert(w.node());
  {
    std::optional<NoGradGuard> no_grad;
    if (!create_graph) no_grad.emplace();

    if (!order_.empty()) acc[order_.front()] = Tensor::full(root_.shape(), 1.0, root_.precision());
    for (const detail::Node* node : order_) {
      auto it = acc.find(node);
      if (it == acc.end() || !node->backward) continue;
      if (stop_at_gradients_ && node->gradient_output) continue;
      const Tensor g = it->second;
      std::vector<Tensor> input_grads = node->backward(g);
      for (std::size_t i = 0; i < node->inputs.size(); ++i) {
        const Tensor& in = node->inputs[i];
        if (!in.requires_grad() || !input_grads[i].defined()) continue;
        auto [slot, fresh] = acc.try_emplace(in.node(), input_grads[i]);
        if (!fresh) slot->second = add(slot->second, input_grads[i]);
      }
      // Interior gradients are no longer needed once propagated.
      if (!keep.contains(node)) acc.erase(node);
    }
  }

  std::vector<Tensor> out;
  out.reserve(wrt.size());
  for (const Tensor& w : wrt) {
    require(w.defined(), "grad: undefined tensor in wrt");
    auto it = w.requires_grad() ? acc.find(w.node()) : acc.end();
    Tensor g = it != acc.end() ? it->second : Tensor::zeros(w.shape(), w.precision());
    out.push_back(mark_gradient(g, create_graph));
  }
  return out;
}

std::vector<Tensor> grad(const Tensor& loss, std::span<const Tensor> wrt, GradOptions options) {
  require(loss.defined() && loss.numel() == 1 && loss.rank() <= 1,
          "grad: loss must be a scalar, got " +
              (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  return GradTape(loss).backward(wrt, options.create_graph);
}

Tensor grad(const Tensor& loss, const Tensor& wrt, GradOptions options) {
  return grad(loss, std::span<const Tensor>(&wrt, 1), options).front();
}

std::vector<Tensor> grad2(const Tensor& meta_loss, std::span<const Tensor> wrt, bool first_order) {
  require(meta_loss.defined() && meta_loss.numel() == 1 && meta_loss.rank() <= 1,
          "grad2: meta-loss must be a scalar");
  if (!first_order && meta_loss.node()->depends_on_frozen_gradient)
    throw ConfigError(
        "grad2: meta-loss depends on inner gradients recorded without create_graph; "
        "rebuild the inner steps with create_graph or request first_order");
  return GradTape(meta_loss, first_order).backward(wrt, false);
}

}  // namespace kml
