#include "sharedtext/text_pool.hpp"

#include <cmath>

#include "sharedtext/errors.hpp"

namespace sharedtext {

void TextPoolConfig::validate() const {
  if (height < 1) throw ConfigError("text_pool: height must be >= 1");
}

FeatureRect project_region(const Box& region, int stride, int feature_h, int feature_w) {
  if (stride < 1) throw ConfigError("text_pool: stride must be >= 1");
  const int x0 = std::max(0, static_cast<int>(std::floor(region.x / stride)));
  const int y0 = std::max(0, static_cast<int>(std::floor(region.y / stride)));
  const int x1 = std::min(feature_w, static_cast<int>(std::ceil(region.right() / stride)));
  const int y1 = std::min(feature_h, static_cast<int>(std::ceil(region.bottom() / stride)));
  if (x1 <= x0 || y1 <= y0) {
    throw RegionError("text_pool: region projects to an empty feature window");
  }
  return {y0, x0, y1 - y0, x1 - x0};
}

int pooled_width(int region_h, int region_w, int height) {
  const double w = static_cast<double>(region_w) * height / region_h;
  return std::max(1, static_cast<int>(std::lround(w)));
}

std::pair<int, int> bin_bounds(int index, int extent, int bins) {
  const int start = static_cast<int>(static_cast<long long>(index) * extent / bins);
  int end = static_cast<int>(static_cast<long long>(index + 1) * extent / bins);
  if (end <= start) end = start + 1;
  return {start, end};
}

PooledTextFeature text_pool(Graph& g, const Var& features, const Box& region, int stride,
                            const TextPoolConfig& cfg) {
  cfg.validate();
  const Tensor& f = features->value;
  if (f.rank() != 4 || f.dim(0) != 1) {
    throw DimensionError("text_pool: features must be [1,C,H,W], got " + shape_string(f.shape()));
  }
  const int channels = f.dim(1), fh = f.dim(2), fw = f.dim(3);
  const FeatureRect rect = project_region(region, stride, fh, fw);
  const int out_h = cfg.height;
  const int out_w = pooled_width(rect.h, rect.w, out_h);

  Tensor out({1, channels, out_h, out_w});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  const std::size_t plane = static_cast<std::size_t>(fh) * fw;
  std::size_t o = 0;
  for (int c = 0; c < channels; ++c) {
    const std::size_t base = static_cast<std::size_t>(c) * plane;
    for (int i = 0; i < out_h; ++i) {
      const auto [r0, r1] = bin_bounds(i, rect.h, out_h);
      for (int j = 0; j < out_w; ++j) {
        const auto [c0, c1] = bin_bounds(j, rect.w, out_w);
        std::size_t best = base + static_cast<std::size_t>(rect.y0 + r0) * fw + rect.x0 + c0;
        double best_v = f[best];
        for (int y = r0; y < r1; ++y) {
          for (int x = c0; x < c1; ++x) {
            const std::size_t idx = base + static_cast<std::size_t>(rect.y0 + y) * fw + rect.x0 + x;
            if (f[idx] > best_v) {
              best_v = f[idx];
              best = idx;
            }
          }
        }
        out[o] = best_v;
        (*argmax)[o] = best;
        ++o;
      }
    }
  }

  PooledTextFeature pooled;
  pooled.source = rect;
  pooled.feature_shape = f.shape();
  pooled.argmax = argmax;
  pooled.data = g.record(std::move(out), {features}, [features, argmax](const Tensor& gout) {
    Tensor& gin = features->grad_buffer();
    for (std::size_t i = 0; i < gout.size(); ++i) gin[(*argmax)[i]] += gout[i];
  });
  return pooled;
}

Tensor text_pool_backward(const Tensor& upstream, const PooledTextFeature& pooled) {
  if (!pooled.argmax || pooled.feature_shape.empty()) {
    throw StateError("text_pool_backward: no forward record");
  }
  if (upstream.size() != pooled.argmax->size()) {
    throw DimensionError("text_pool_backward: upstream size does not match pooled output");
  }
  Tensor grad(pooled.feature_shape, 0.0);
  for (std::size_t i = 0; i < upstream.size(); ++i) grad[(*pooled.argmax)[i]] += upstream[i];
  return grad;
}

}  // namespace sharedtext
