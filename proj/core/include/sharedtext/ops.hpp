#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <vector>

#include "sharedtext/tensor.hpp"

namespace sharedtext {

struct ConvGeometry {
  int stride = 1;
  int pad_h = 0;
  int pad_w = 0;
};

// 2-D cross-correlation. input [N,Cin,H,W], weight [Cout,Cin,kh,kw], bias [Cout].
// Output extent floor((H + 2*pad - kh) / stride) + 1 per spatial axis.
Var conv2d(Graph& g, const Var& input, const Var& weight, const Var& bias, ConvGeometry geom);
Var conv2d(Graph& g, const Var& input, const Var& weight, const Var& bias, int stride, int pad);

// Reference forward by the direct sextuple loop; used to validate conv2d.
Tensor conv2d_direct(const Tensor& input, const Tensor& weight, const Tensor& bias,
                     ConvGeometry geom);

struct PoolWindow {
  int kernel_h = 2;
  int kernel_w = 2;
  int stride_h = 2;
  int stride_w = 2;

  static PoolWindow square(int k, int stride) { return {k, k, stride, stride}; }
};

struct MaxPoolResult {
  Var output;
  // Flat input index of the chosen element for every output element. Ties go
  // to the first maximum in row-major window order.
  std::shared_ptr<const std::vector<std::size_t>> argmax;
};

MaxPoolResult maxpool2d(Graph& g, const Var& input, PoolWindow window);
MaxPoolResult maxpool2d(Graph& g, const Var& input, int k, int stride);

// relu'(0) is taken as 0.
Var relu(Graph& g, const Var& x);
Var add(Graph& g, const Var& a, const Var& b);
Var mul(Graph& g, const Var& a, const Var& b);
Var scale(Graph& g, const Var& x, double factor);
Var sum(Graph& g, const Var& x);
Var reshape(Graph& g, const Var& x, Shape shape);

// Concatenates [N,Ci,H,W] tensors along the channel axis.
Var concat_channels(Graph& g, std::span<const Var> inputs);

// Fully connected: x [R,in], weight [out,in], bias [out] -> [R,out].
Var affine(Graph& g, const Var& x, const Var& weight, const Var& bias);

// log_softmax over axis 1 of a tensor shaped [N,C,...].
Var log_softmax(Graph& g, const Var& x);

// Mean over rows of -log softmax(logits[r])[target[r]]. logits [R,C].
Var softmax_cross_entropy(Graph& g, const Var& logits, std::span<const int> targets);

// sum_r weight[r] * sum_c smoothL1(pred[r,c] - target[r,c]) / normalizer,
// where smoothL1(d) = 0.5 d^2 for |d| < 1 and |d| - 0.5 otherwise.
Var smooth_l1(Graph& g, const Var& pred, const Tensor& target, std::span<const double> row_weight,
              double normalizer);

// Rearranges a [1, A*K, H, W] map into rows [(h*W + w)*A + a, K]. With A = 1
// and H = 1 this turns a [1,C,1,T] frame map into [T,C].
Var to_rows(Graph& g, const Var& x, int per_row);

// Selects rows of a [R,C] tensor.
Var gather_rows(Graph& g, const Var& x, std::span<const int> rows);

}  // namespace sharedtext
