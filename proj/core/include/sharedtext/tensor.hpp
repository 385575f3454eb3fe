#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace sharedtext {

using Shape = std::vector<int>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

// Dense row-major array of doubles. Value type: copies are deep.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double value) { return Tensor({1}, value); }

  const Shape& shape() const noexcept { return shape_; }
  int rank() const noexcept { return static_cast<int>(shape_.size()); }
  int dim(int axis) const;
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // Value of a single-element tensor.
  double item() const;

  void fill(double value);
  Tensor reshaped(Shape shape) const;
  bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }
  bool all_finite() const noexcept;

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// A value participating in reverse-mode differentiation. The gradient buffer
// exists iff requires_grad; it is allocated lazily on first accumulation.
struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;

  // Returns the gradient buffer, allocating zeros of value's shape if needed.
  Tensor& grad_buffer();
  void zero_grad();
};

using Var = std::shared_ptr<Node>;

Var parameter(Tensor value);
Var constant(Tensor value);

// Tape of executed operations. Ops whose inputs need no gradient are not
// recorded, so a Graph used purely for inference stays empty.
class Graph {
 public:
  using Backward = std::function<void(const Tensor& grad_out)>;

  Graph() = default;
  // A non-recording graph marks every result as not requiring gradients.
  explicit Graph(bool recording) : recording_(recording) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  Var record(Tensor value, std::initializer_list<Var> inputs, Backward backward);
  Var record(Tensor value, std::span<const Var> inputs, Backward backward);

  // Seeds d(root)/d(root) = 1 and runs every recorded op once, newest first.
  // root must hold a single element. A graph can be back-propagated once.
  void backward(const Var& root);

  std::size_t op_count() const noexcept { return ops_.size(); }
  bool recording() const noexcept { return recording_; }

 private:
  struct Op {
    Var output;
    Backward backward;
  };
  std::vector<Op> ops_;
  bool consumed_ = false;
  bool recording_ = true;
};

// Adds `delta` into the gradient of `node` if it requires one.
void accumulate_grad(Node& node, const Tensor& delta);

}  // namespace sharedtext
