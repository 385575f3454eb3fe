#include "sharedtext/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "sharedtext/errors.hpp"

namespace sharedtext {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw DimensionError("non-positive extent in shape " + shape_string(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  data_.assign(shape_size(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  if (shape_size(shape_) != data_.size()) {
    throw DimensionError("shape " + shape_string(shape_) + " does not match " +
                         std::to_string(data_.size()) + " values");
  }
}

int Tensor::dim(int axis) const {
  if (axis < 0 || axis >= rank()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " +
                         shape_string(shape_));
  }
  return shape_[axis];
}

double Tensor::item() const {
  if (data_.size() != 1) throw DimensionError("item() on tensor " + shape_string(shape_));
  return data_[0];
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_string(shape_) + " to " +
                         shape_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor& Node::grad_buffer() {
  if (grad.empty()) grad = Tensor(value.shape(), 0.0);
  return grad;
}

void Node::zero_grad() {
  if (requires_grad) grad = Tensor(value.shape(), 0.0);
}

Var parameter(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  node->grad = Tensor(node->value.shape(), 0.0);
  return node;
}

Var constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return node;
}

void accumulate_grad(Node& node, const Tensor& delta) {
  if (!node.requires_grad) return;
  Tensor& g = node.grad_buffer();
  if (!g.same_shape(delta)) {
    throw DimensionError("gradient shape " + shape_string(delta.shape()) +
                         " does not match value " + shape_string(g.shape()));
  }
  double* dst = g.data();
  const double* src = delta.data();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += src[i];
}

Var Graph::record(Tensor value, std::initializer_list<Var> inputs, Backward backward) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(backward));
}

Var Graph::record(Tensor value, std::span<const Var> inputs, Backward backward) {
  auto out = std::make_shared<Node>();
  out->value = std::move(value);
  out->requires_grad = recording_ &&
      std::any_of(inputs.begin(), inputs.end(), [](const Var& v) { return v && v->requires_grad; });
  if (out->requires_grad) ops_.push_back(Op{out, std::move(backward)});
  return out;
}

void Graph::backward(const Var& root) {
  if (consumed_) throw StateError("graph already back-propagated");
  if (root->value.size() != 1) {
    throw DimensionError("backward root must be scalar, got " +
                         shape_string(root->value.shape()));
  }
  consumed_ = true;
  if (!root->requires_grad) return;
  root->grad_buffer()[0] += 1.0;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
    Node& out = *it->output;
    if (out.grad.empty()) continue;  // no downstream use reached this op
    it->backward(out.grad);
    // Intermediate buffers are no longer needed once propagated.
    if (out.grad.data() != root->grad.data()) out.grad = Tensor();
  }
}

}  // namespace sharedtext
