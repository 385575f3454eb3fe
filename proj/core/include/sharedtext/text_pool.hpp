#pragma once

#include <cstddef>
#include <memory>
#include <utility>
#include <vector>

#include "sharedtext/detector.hpp"
#include "sharedtext/tensor.hpp"

namespace sharedtext {

struct TextPoolConfig {
  int height = 8;  // H: output rows for every region

  void validate() const;
};

// Region on the feature grid, in cells.
struct FeatureRect {
  int y0 = 0;
  int x0 = 0;
  int h = 0;
  int w = 0;

  friend bool operator==(const FeatureRect&, const FeatureRect&) = default;
};

struct PooledTextFeature {
  Var data;  // [1, C, H, Wout]
  FeatureRect source;
  Shape feature_shape;
  // Flat index into the feature map of the maximum behind each output value.
  std::shared_ptr<const std::vector<std::size_t>> argmax;

  int width() const { return data->value.dim(3); }
};

// Divides by the stride, rounding the near edge down and the far edge up, and
// clips to the map. Throws RegionError when nothing remains.
FeatureRect project_region(const Box& region, int stride, int feature_h, int feature_w);

// max(1, round(w * H / h)).
int pooled_width(int region_h, int region_w, int height);

// Cells [floor(i*extent/bins), floor((i+1)*extent/bins)) of bin i, widened to
// one cell when that is empty (extent < bins).
std::pair<int, int> bin_bounds(int index, int extent, int bins);

// Max-pools the region into H x Wout cells per channel. Ties resolve to the
// first maximum in row-major order.
PooledTextFeature text_pool(Graph& g, const Var& features, const Box& region, int stride,
                            const TextPoolConfig& cfg);

// Routes each upstream element to its recorded argmax. Returns a tensor of the
// feature map's shape.
Tensor text_pool_backward(const Tensor& upstream, const PooledTextFeature& pooled);

}  // namespace sharedtext
