#include "kml/tensor.hpp"

#include <sstream>

namespace kml {

namespace {
thread_local bool g_grad_enabled = true;

void round_to_f32(std::vector<double>& values) {
  for (double& v : values) v = static_cast<double>(static_cast<float>(v));
}
}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "," : "") << shape[i];
  out << ']';
  return out.str();
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values, Precision precision) {
  for (std::size_t e : shape) require(e > 0, "tensor extents must be positive: " + shape_str(shape));
  require(values.size() == shape_numel(shape),
          "value count " + std::to_string(values.size()) + " does not match shape " +
              shape_str(shape));
  if (precision == Precision::f32) round_to_f32(values);
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->values = std::make_shared<const std::vector<double>>(std::move(values));
  node->precision = precision;
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape, Precision precision) {
  const std::size_t n = shape_numel(shape);
  return from_values(std::move(shape), std::vector<double>(n, 0.0), precision);
}

Tensor Tensor::full(Shape shape, double value, Precision precision) {
  const std::size_t n = shape_numel(shape);
  return from_values(std::move(shape), std::vector<double>(n, value), precision);
}

Tensor Tensor::scalar(double value, Precision precision) {
  return from_values({}, {value}, precision);
}

const Shape& Tensor::shape() const {
  require(defined(), "use of undefined tensor");
  return node_->shape;
}

std::size_t Tensor::numel() const { return values().size(); }

std::span<const double> Tensor::values() const {
  require(defined(), "use of undefined tensor");
  return {node_->values->data(), node_->values->size()};
}

double Tensor::item() const {
  require(numel() == 1, "item() needs a single-element tensor, got " + shape_str(shape()));
  return values()[0];
}

Precision Tensor::precision() const {
  require(defined(), "use of undefined tensor");
  return node_->precision;
}

bool Tensor::requires_grad() const { return defined() && node_->requires_grad; }

const char* Tensor::op() const { return defined() ? node_->op : "undefined"; }

Tensor Tensor::detach() const {
  require(defined(), "detach of undefined tensor");
  auto node = std::make_shared<detail::Node>();
  node->shape = node_->shape;
  node->values = node_->values;
  node->precision = node_->precision;
  return Tensor(std::move(node));
}

Tensor Tensor::as_parameter() const {
  Tensor leaf = detach();
  leaf.node_->requires_grad = true;
  return leaf;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Precision promote(std::span<const Tensor> tensors) {
  for (const Tensor& t : tensors)
    if (t.defined() && t.precision() == Precision::f32) return Precision::f32;
  return Precision::f64;
}

Tensor make_result(Shape shape, std::vector<double> values, Precision precision,
                   std::vector<Tensor> inputs, BackwardFn backward, const char* op) {
  if (precision == Precision::f32) round_to_f32(values);
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->values = std::make_shared<const std::vector<double>>(std::move(values));
  node->precision = precision;
  node->op = op;
  bool needs_grad = false;
  for (const Tensor& in : inputs) {
    if (!in.defined()) continue;
    node->depends_on_live_gradient |= in.node_->depends_on_live_gradient;
    node->depends_on_frozen_gradient |= in.node_->depends_on_frozen_gradient;
    needs_grad |= in.node_->requires_grad;
  }
  if (needs_grad && g_grad_enabled) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

Tensor mark_gradient(const Tensor& g, bool live) {
  auto node = std::make_shared<detail::Node>();
  node->shape = g.node_->shape;
  node->values = g.node_->values;
  node->precision = g.node_->precision;
  node->op = "gradient";
  node->gradient_output = true;
  node->depends_on_live_gradient = g.node_->depends_on_live_gradient || live;
  node->depends_on_frozen_gradient = g.node_->depends_on_frozen_gradient || !live;
  if (live && g.node_->requires_grad) {
    node->requires_grad = true;
    node->inputs = {g};
    node->backward = [](const Tensor& go) { return std::vector<Tensor>{go}; };
  }
  return Tensor(std::move(node));
}

}  // namespace kml
