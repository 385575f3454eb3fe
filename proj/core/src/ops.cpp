#include "sharedtext/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "sharedtext/errors.hpp"

namespace sharedtext {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatMap = Eigen::Map<const RowMat>;
using MatMap = Eigen::Map<RowMat>;

void require(bool ok, const std::string& message) {
  if (!ok) throw DimensionError(message);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

int conv_extent(int in, int k, int pad, int stride) { return (in + 2 * pad - k) / stride + 1; }

struct ConvDims {
  int n, cin, h, w, cout, kh, kw, ho, wo;
  std::size_t k() const { return static_cast<std::size_t>(cin) * kh * kw; }
  std::size_t p() const { return static_cast<std::size_t>(ho) * wo; }
  bool pointwise(const ConvGeometry& g) const {
    return kh == 1 && kw == 1 && g.stride == 1 && g.pad_h == 0 && g.pad_w == 0;
  }
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, const Tensor& b, const ConvGeometry& g) {
  require(x.rank() == 4, "conv2d: input must be [N,C,H,W], got " + shape_string(x.shape()));
  require(w.rank() == 4, "conv2d: weight must be [Cout,Cin,kh,kw], got " + shape_string(w.shape()));
  require(b.rank() == 1 && b.dim(0) == w.dim(0), "conv2d: bias must be [Cout]");
  require(w.dim(1) == x.dim(1), "conv2d: channel mismatch " + shape_string(x.shape()) + " * " +
                                    shape_string(w.shape()));
  require(g.stride >= 1 && g.pad_h >= 0 && g.pad_w >= 0, "conv2d: invalid stride/pad");
  ConvDims d{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), w.dim(3), 0, 0};
  require(d.kh <= d.h + 2 * g.pad_h && d.kw <= d.w + 2 * g.pad_w,
          "conv2d: kernel larger than padded input");
  d.ho = conv_extent(d.h, d.kh, g.pad_h, g.stride);
  d.wo = conv_extent(d.w, d.kw, g.pad_w, g.stride);
  return d;
}

// Unfolds one image [C,H,W] into a [C*kh*kw, Ho*Wo] patch matrix.
void im2col(const double* x, const ConvDims& d, const ConvGeometry& g, double* col) {
  const int s = g.stride;
  for (int c = 0; c < d.cin; ++c) {
    for (int ki = 0; ki < d.kh; ++ki) {
      for (int kj = 0; kj < d.kw; ++kj) {
        double* row = col + ((static_cast<std::size_t>(c) * d.kh + ki) * d.kw + kj) * d.p();
        for (int oh = 0; oh < d.ho; ++oh) {
          double* dst = row + static_cast<std::size_t>(oh) * d.wo;
          const int ih = oh * s - g.pad_h + ki;
          if (ih < 0 || ih >= d.h) {
            std::fill(dst, dst + d.wo, 0.0);
            continue;
          }
          const double* src = x + (static_cast<std::size_t>(c) * d.h + ih) * d.w;
          const int offset = kj - g.pad_w;
          if (s == 1) {
            const int lo = std::max(0, -offset);
            const int hi = std::min(d.wo, d.w - offset);
            std::fill(dst, dst + lo, 0.0);
            if (hi > lo) std::memcpy(dst + lo, src + lo + offset, sizeof(double) * (hi - lo));
            std::fill(dst + std::max(lo, hi), dst + d.wo, 0.0);
          } else {
            for (int ow = 0; ow < d.wo; ++ow) {
              const int iw = ow * s + offset;
              dst[ow] = (iw >= 0 && iw < d.w) ? src[iw] : 0.0;
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters patch-matrix gradients back into [C,H,W].
void col2im(const double* col, const ConvDims& d, const ConvGeometry& g, double* x) {
  const int s = g.stride;
  for (int c = 0; c < d.cin; ++c) {
    for (int ki = 0; ki < d.kh; ++ki) {
      for (int kj = 0; kj < d.kw; ++kj) {
        const double* row = col + ((static_cast<std::size_t>(c) * d.kh + ki) * d.kw + kj) * d.p();
        for (int oh = 0; oh < d.ho; ++oh) {
          const int ih = oh * s - g.pad_h + ki;
          if (ih < 0 || ih >= d.h) continue;
          const double* src = row + static_cast<std::size_t>(oh) * d.wo;
          double* dst = x + (static_cast<std::size_t>(c) * d.h + ih) * d.w;
          for (int ow = 0; ow < d.wo; ++ow) {
            const int iw = ow * s - g.pad_w + kj;
            if (iw >= 0 && iw < d.w) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(Graph& g, const Var& input, const Var& weight, const Var& bias, int stride, int pad) {
  return conv2d(g, input, weight, bias, ConvGeometry{stride, pad, pad});
}

Var conv2d(Graph& g, const Var& input, const Var& weight, const Var& bias, ConvGeometry geom) {
  const Tensor& x = input->value;
  const Tensor& w = weight->value;
  const Tensor& b = bias->value;
  const ConvDims d = conv_dims(x, w, b, geom);
  if (!x.all_finite()) throw NumericError("conv2d: non-finite input");

  Tensor out({d.n, d.cout, d.ho, d.wo});
  const std::size_t in_stride = static_cast<std::size_t>(d.cin) * d.h * d.w;
  const std::size_t out_stride = static_cast<std::size_t>(d.cout) * d.p();
  const bool pointwise = d.pointwise(geom);
  std::vector<double> col(pointwise ? 0 : d.k() * d.p());
  ConstMatMap wm(w.data(), d.cout, static_cast<Eigen::Index>(d.k()));
  Eigen::Map<const Eigen::VectorXd> bv(b.data(), d.cout);
  for (int n = 0; n < d.n; ++n) {
    const double* patches = x.data() + n * in_stride;
    if (!pointwise) {
      im2col(patches, d, geom, col.data());
      patches = col.data();
    }
    ConstMatMap cm(patches, static_cast<Eigen::Index>(d.k()), static_cast<Eigen::Index>(d.p()));
    MatMap om(out.data() + n * out_stride, d.cout, static_cast<Eigen::Index>(d.p()));
    om.noalias() = wm * cm;
    om.colwise() += bv;
  }

  return g.record(std::move(out), {input, weight, bias},
                  [input, weight, bias, geom, d](const Tensor& gout) {
                    const bool pointwise = d.pointwise(geom);
                    const std::size_t in_stride = static_cast<std::size_t>(d.cin) * d.h * d.w;
                    const std::size_t out_stride = static_cast<std::size_t>(d.cout) * d.p();
                    const auto K = static_cast<Eigen::Index>(d.k());
                    const auto P = static_cast<Eigen::Index>(d.p());
                    std::vector<double> col(pointwise ? 0 : d.k() * d.p());
                    std::vector<double> dcol(d.k() * d.p());
                    ConstMatMap wm(weight->value.data(), d.cout, K);
                    for (int n = 0; n < d.n; ++n) {
                      ConstMatMap gm(gout.data() + n * out_stride, d.cout, P);
                      if (bias->requires_grad) {
                        // Plain loops: Eigen's reductions peel by address, so their rounding
                        // would depend on where the allocator put the buffer.
                        double* db = bias->grad_buffer().data();
                        for (int c = 0; c < d.cout; ++c) {
                          const double* row = gout.data() + n * out_stride + static_cast<std::size_t>(c) * P;
                          double acc = 0.0;
                          for (Eigen::Index j = 0; j < P; ++j) acc += row[j];
                          db[c] += acc;
                        }
                      }
                      if (weight->requires_grad) {
                        const double* patches = input->value.data() + n * in_stride;
                        if (!pointwise) {
                          im2col(patches, d, geom, col.data());
                          patches = col.data();
                        }
                        ConstMatMap cm(patches, K, P);
                        MatMap dw(weight->grad_buffer().data(), d.cout, K);
                        dw.noalias() += gm * cm.transpose();
                      }
                      if (input->requires_grad) {
                        double* dx = input->grad_buffer().data() + n * in_stride;
                        if (pointwise) {
                          MatMap dxm(dx, K, P);
                          dxm.noalias() += wm.transpose() * gm;
                        } else {
                          MatMap dcm(dcol.data(), K, P);
                          dcm.noalias() = wm.transpose() * gm;
                          col2im(dcol.data(), d, geom, dx);
                        }
                      }
                    }
                  });
}

Tensor conv2d_direct(const Tensor& x, const Tensor& w, const Tensor& b, ConvGeometry geom) {
  const ConvDims d = conv_dims(x, w, b, geom);
  Tensor out({d.n, d.cout, d.ho, d.wo});
  std::size_t o = 0;
  for (int n = 0; n < d.n; ++n) {
    for (int co = 0; co < d.cout; ++co) {
      for (int oh = 0; oh < d.ho; ++oh) {
        for (int ow = 0; ow < d.wo; ++ow) {
          double acc = b[co];
          for (int ci = 0; ci < d.cin; ++ci) {
            for (int ki = 0; ki < d.kh; ++ki) {
              const int ih = oh * geom.stride - geom.pad_h + ki;
              if (ih < 0 || ih >= d.h) continue;
              for (int kj = 0; kj < d.kw; ++kj) {
                const int iw = ow * geom.stride - geom.pad_w + kj;
                if (iw < 0 || iw >= d.w) continue;
                acc += x[((static_cast<std::size_t>(n) * d.cin + ci) * d.h + ih) * d.w + iw] *
                       w[((static_cast<std::size_t>(co) * d.cin + ci) * d.kh + ki) * d.kw + kj];
              }
            }
          }
          out[o++] = acc;
        }
      }
    }
  }
  return out;
}

MaxPoolResult maxpool2d(Graph& g, const Var& input, int k, int stride) {
  return maxpool2d(g, input, PoolWindow::square(k, stride));
}

MaxPoolResult maxpool2d(Graph& g, const Var& input, PoolWindow win) {
  const Tensor& x = input->value;
  require(x.rank() == 4, "maxpool2d: input must be [N,C,H,W]");
  require(win.kernel_h >= 1 && win.kernel_w >= 1 && win.stride_h >= 1 && win.stride_w >= 1,
          "maxpool2d: kernel and stride must be >= 1");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  require(win.kernel_h <= h && win.kernel_w <= w,
          "maxpool2d: window larger than input " + shape_string(x.shape()));
  const int ho = (h - win.kernel_h) / win.stride_h + 1;
  const int wo = (w - win.kernel_w) / win.stride_w + 1;
  Tensor out({n, c, ho, wo});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  std::size_t o = 0;
  for (int plane = 0; plane < n * c; ++plane) {
    const std::size_t base = static_cast<std::size_t>(plane) * h * w;
    for (int oh = 0; oh < ho; ++oh) {
      for (int ow = 0; ow < wo; ++ow) {
        std::size_t best = base + static_cast<std::size_t>(oh * win.stride_h) * w + ow * win.stride_w;
        double best_v = x[best];
        for (int i = 0; i < win.kernel_h; ++i) {
          for (int j = 0; j < win.kernel_w; ++j) {
            const std::size_t idx =
                base + static_cast<std::size_t>(oh * win.stride_h + i) * w + ow * win.stride_w + j;
            if (x[idx] > best_v) {
              best_v = x[idx];
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
  Var y = g.record(std::move(out), {input}, [input, argmax](const Tensor& gout) {
    Tensor& gin = input->grad_buffer();
    for (std::size_t i = 0; i < gout.size(); ++i) gin[(*argmax)[i]] += gout[i];
  });
  return {std::move(y), std::move(argmax)};
}

Var relu(Graph& g, const Var& x) {
  Tensor out = x->value;
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return g.record(std::move(out), {x}, [x](const Tensor& gout) {
    Tensor& gin = x->grad_buffer();
    const Tensor& xv = x->value;
    for (std::size_t i = 0; i < gout.size(); ++i) {
      if (xv[i] > 0.0) gin[i] += gout[i];
    }
  });
}

Var add(Graph& g, const Var& a, const Var& b) {
  require_same_shape(a->value, b->value, "add");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b->value[i];
  return g.record(std::move(out), {a, b}, [a, b](const Tensor& gout) {
    accumulate_grad(*a, gout);
    accumulate_grad(*b, gout);
  });
}

Var mul(Graph& g, const Var& a, const Var& b) {
  require_same_shape(a->value, b->value, "mul");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b->value[i];
  return g.record(std::move(out), {a, b}, [a, b](const Tensor& gout) {
    if (a->requires_grad) {
      Tensor& ga = a->grad_buffer();
      for (std::size_t i = 0; i < gout.size(); ++i) ga[i] += gout[i] * b->value[i];
    }
    if (b->requires_grad) {
      Tensor& gb = b->grad_buffer();
      for (std::size_t i = 0; i < gout.size(); ++i) gb[i] += gout[i] * a->value[i];
    }
  });
}

Var scale(Graph& g, const Var& x, double factor) {
  Tensor out = x->value;
  for (double& v : out.values()) v *= factor;
  return g.record(std::move(out), {x}, [x, factor](const Tensor& gout) {
    Tensor& gin = x->grad_buffer();
    for (std::size_t i = 0; i < gout.size(); ++i) gin[i] += factor * gout[i];
  });
}

Var sum(Graph& g, const Var& x) {
  double acc = 0.0;
  for (double v : x->value.values()) acc += v;
  return g.record(Tensor::scalar(acc), {x}, [x](const Tensor& gout) {
    Tensor& gin = x->grad_buffer();
    const double s = gout[0];
    for (double& v : gin.values()) v += s;
  });
}

Var reshape(Graph& g, const Var& x, Shape shape) {
  Tensor out = x->value.reshaped(std::move(shape));
  return g.record(std::move(out), {x}, [x](const Tensor& gout) {
    Tensor& gin = x->grad_buffer();
    for (std::size_t i = 0; i < gout.size(); ++i) gin[i] += gout[i];
  });
}

Var concat_channels(Graph& g, std::span<const Var> inputs) {
  require(!inputs.empty(), "concat_channels: no inputs");
  const Tensor& first = inputs.front()->value;
  require(first.rank() == 4, "concat_channels: inputs must be [N,C,H,W]");
  const int n = first.dim(0), h = first.dim(2), w = first.dim(3);
  int total_c = 0;
  for (const Var& v : inputs) {
    const Tensor& t = v->value;
    require(t.rank() == 4 && t.dim(0) == n && t.dim(2) == h && t.dim(3) == w,
            "concat_channels: incompatible shape " + shape_string(t.shape()));
    total_c += t.dim(1);
  }
  Tensor out({n, total_c, h, w});
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<int> offsets;
  int c0 = 0;
  for (const Var& v : inputs) {
    offsets.push_back(c0);
    const int c = v->value.dim(1);
    for (int b = 0; b < n; ++b) {
      std::copy_n(v->value.data() + static_cast<std::size_t>(b) * c * plane, c * plane,
                  out.data() + (static_cast<std::size_t>(b) * total_c + c0) * plane);
    }
    c0 += c;
  }
  std::vector<Var> held(inputs.begin(), inputs.end());
  return g.record(std::move(out), inputs, [held, offsets, n, total_c, plane](const Tensor& gout) {
    for (std::size_t i = 0; i < held.size(); ++i) {
      if (!held[i]->requires_grad) continue;
      Tensor& gin = held[i]->grad_buffer();
      const int c = gin.dim(1);
      for (int b = 0; b < n; ++b) {
        const double* src =
            gout.data() + (static_cast<std::size_t>(b) * total_c + offsets[i]) * plane;
        double* dst = gin.data() + static_cast<std::size_t>(b) * c * plane;
        for (std::size_t k = 0; k < c * plane; ++k) dst[k] += src[k];
      }
    }
  });
}

Var affine(Graph& g, const Var& x, const Var& weight, const Var& bias) {
  const Tensor& xv = x->value;
  const Tensor& wv = weight->value;
  require(xv.rank() == 2 && wv.rank() == 2 && wv.dim(1) == xv.dim(1),
          "affine: expected x [R,in] and weight [out,in]");
  require(bias->value.rank() == 1 && bias->value.dim(0) == wv.dim(0), "affine: bias must be [out]");
  const int rows = xv.dim(0), in = xv.dim(1), outd = wv.dim(0);
  Tensor out({rows, outd});
  ConstMatMap xm(xv.data(), rows, in);
  ConstMatMap wm(wv.data(), outd, in);
  MatMap om(out.data(), rows, outd);
  om.noalias() = xm * wm.transpose();
  om.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias->value.data(), outd);
  return g.record(std::move(out), {x, weight, bias},
                  [x, weight, bias, rows, in, outd](const Tensor& gout) {
                    ConstMatMap gm(gout.data(), rows, outd);
                    if (x->requires_grad) {
                      MatMap dx(x->grad_buffer().data(), rows, in);
                      dx.noalias() += gm * ConstMatMap(weight->value.data(), outd, in);
                    }
                    if (weight->requires_grad) {
                      MatMap dw(weight->grad_buffer().data(), outd, in);
                      dw.noalias() += gm.transpose() * ConstMatMap(x->value.data(), rows, in);
                    }
                    if (bias->requires_grad) {
                      double* db = bias->grad_buffer().data();
                      for (Eigen::Index r = 0; r < rows; ++r) {
                        for (Eigen::Index c = 0; c < outd; ++c) db[c] += gm(r, c);
                      }
                    }
                  });
}

Var log_softmax(Graph& g, const Var& x) {
  const Tensor& xv = x->value;
  require(xv.rank() >= 2, "log_softmax: need at least [N,C]");
  const int n = xv.dim(0), c = xv.dim(1);
  const std::size_t inner = xv.size() / (static_cast<std::size_t>(n) * c);
  Tensor out(xv.shape());
  for (int b = 0; b < n; ++b) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = static_cast<std::size_t>(b) * c * inner + i;
      double m = -std::numeric_limits<double>::infinity();
      for (int k = 0; k < c; ++k) m = std::max(m, xv[base + k * inner]);
      double s = 0.0;
      for (int k = 0; k < c; ++k) s += std::exp(xv[base + k * inner] - m);
      const double lse = m + std::log(s);
      for (int k = 0; k < c; ++k) out[base + k * inner] = xv[base + k * inner] - lse;
    }
  }
  auto saved = std::make_shared<Tensor>(out);
  return g.record(std::move(out), {x}, [x, saved, n, c, inner](const Tensor& gout) {
    Tensor& gin = x->grad_buffer();
    const Tensor& y = *saved;
    for (int b = 0; b < n; ++b) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = static_cast<std::size_t>(b) * c * inner + i;
        double gsum = 0.0;
        for (int k = 0; k < c; ++k) gsum += gout[base + k * inner];
        for (int k = 0; k < c; ++k) {
          const std::size_t idx = base + k * inner;
          gin[idx] += gout[idx] - std::exp(y[idx]) * gsum;
        }
      }
    }
  });
}

Var softmax_cross_entropy(Graph& g, const Var& logits, std::span<const int> targets) {
  const Tensor& xv = logits->value;
  require(xv.rank() == 2, "softmax_cross_entropy: logits must be [R,C]");
  const int rows = xv.dim(0), c = xv.dim(1);
  require(static_cast<int>(targets.size()) == rows, "softmax_cross_entropy: target count mismatch");
  auto probs = std::make_shared<Tensor>(xv.shape());
  double loss = 0.0;
  for (int r = 0; r < rows; ++r) {
    const int t = targets[r];
    require(t >= 0 && t < c, "softmax_cross_entropy: target out of range");
    const double* row = xv.data() + static_cast<std::size_t>(r) * c;
    double m = row[0];
    for (int k = 1; k < c; ++k) m = std::max(m, row[k]);
    double s = 0.0;
    for (int k = 0; k < c; ++k) s += std::exp(row[k] - m);
    const double lse = m + std::log(s);
    for (int k = 0; k < c; ++k) (*probs)[static_cast<std::size_t>(r) * c + k] = std::exp(row[k] - lse);
    loss += lse - row[t];
  }
  loss /= rows;
  std::vector<int> held(targets.begin(), targets.end());
  return g.record(Tensor::scalar(loss), {logits},
                  [logits, probs, held, rows, c](const Tensor& gout) {
                    Tensor& gin = logits->grad_buffer();
                    const double s = gout[0] / rows;
                    for (int r = 0; r < rows; ++r) {
                      for (int k = 0; k < c; ++k) {
                        const std::size_t idx = static_cast<std::size_t>(r) * c + k;
                        gin[idx] += s * ((*probs)[idx] - (k == held[r] ? 1.0 : 0.0));
                      }
                    }
                  });
}

Var smooth_l1(Graph& g, const Var& pred, const Tensor& target, std::span<const double> row_weight,
              double normalizer) {
  const Tensor& pv = pred->value;
  require_same_shape(pv, target, "smooth_l1");
  require(pv.rank() == 2, "smooth_l1: pred must be [R,K]");
  require(static_cast<int>(row_weight.size()) == pv.dim(0), "smooth_l1: weight count mismatch");
  if (!(normalizer > 0.0)) throw ConfigError("smooth_l1: normalizer must be positive");
  const int rows = pv.dim(0), k = pv.dim(1);
  double loss = 0.0;
  for (int r = 0; r < rows; ++r) {
    if (row_weight[r] == 0.0) continue;
    double acc = 0.0;
    for (int j = 0; j < k; ++j) {
      const double d = pv[static_cast<std::size_t>(r) * k + j] - target[static_cast<std::size_t>(r) * k + j];
      const double ad = std::abs(d);
      acc += ad < 1.0 ? 0.5 * d * d : ad - 0.5;
    }
    loss += row_weight[r] * acc;
  }
  loss /= normalizer;
  std::vector<double> weights(row_weight.begin(), row_weight.end());
  auto tgt = std::make_shared<Tensor>(target);
  return g.record(Tensor::scalar(loss), {pred},
                  [pred, tgt, weights, rows, k, normalizer](const Tensor& gout) {
                    Tensor& gin = pred->grad_buffer();
                    const double s = gout[0] / normalizer;
                    for (int r = 0; r < rows; ++r) {
                      if (weights[r] == 0.0) continue;
                      for (int j = 0; j < k; ++j) {
                        const std::size_t idx = static_cast<std::size_t>(r) * k + j;
                        const double d = pred->value[idx] - (*tgt)[idx];
                        gin[idx] += s * weights[r] * std::clamp(d, -1.0, 1.0);
                      }
                    }
                  });
}

Var to_rows(Graph& g, const Var& x, int per_row) {
  const Tensor& xv = x->value;
  require(xv.rank() == 4 && xv.dim(0) == 1, "to_rows: input must be [1,A*K,H,W]");
  require(per_row >= 1 && xv.dim(1) % per_row == 0, "to_rows: channels not divisible by row width");
  const int a_count = xv.dim(1) / per_row, h = xv.dim(2), w = xv.dim(3);
  const int rows = h * w * a_count;
  Tensor out({rows, per_row});
  auto src_index = [=](int r, int k) {
    const int a = r % a_count;
    const int site = r / a_count;
    const int hh = site / w, ww = site % w;
    return ((static_cast<std::size_t>(a) * per_row + k) * h + hh) * w + ww;
  };
  for (int r = 0; r < rows; ++r) {
    for (int k = 0; k < per_row; ++k) out[static_cast<std::size_t>(r) * per_row + k] = xv[src_index(r, k)];
  }
  return g.record(std::move(out), {x}, [x, rows, per_row, src_index](const Tensor& gout) {
    Tensor& gin = x->grad_buffer();
    for (int r = 0; r < rows; ++r) {
      for (int k = 0; k < per_row; ++k) gin[src_index(r, k)] += gout[static_cast<std::size_t>(r) * per_row + k];
    }
  });
}

Var gather_rows(Graph& g, const Var& x, std::span<const int> rows) {
  const Tensor& xv = x->value;
  require(xv.rank() == 2, "gather_rows: input must be [R,C]");
  const int c = xv.dim(1);
  require(!rows.empty(), "gather_rows: empty selection");
  Tensor out({static_cast<int>(rows.size()), c});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] >= 0 && rows[i] < xv.dim(0), "gather_rows: row out of range");
    std::copy_n(xv.data() + static_cast<std::size_t>(rows[i]) * c, c, out.data() + i * c);
  }
  std::vector<int> held(rows.begin(), rows.end());
  return g.record(std::move(out), {x}, [x, held, c](const Tensor& gout) {
    Tensor& gin = x->grad_buffer();
    for (std::size_t i = 0; i < held.size(); ++i) {
      for (int k = 0; k < c; ++k) gin[static_cast<std::size_t>(held[i]) * c + k] += gout[i * c + k];
    }
  });
}

}  // namespace sharedtext
