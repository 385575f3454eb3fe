#include "sharedtext/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sharedtext/errors.hpp"
#include "sharedtext/ops.hpp"

namespace sharedtext {
namespace {

// Keeps exp() of predicted log-extents finite for wild early predictions.
constexpr double kMaxLogScale = 9.210340371976184;  // log(1e4)

double text_probability(double background_logit, double text_logit) {
  return 1.0 / (1.0 + std::exp(background_logit - text_logit));
}

ConvParams init_head(int cin, int cout, int kernel, double std_dev, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, std_dev);
  Tensor w({cout, cin, kernel, kernel});
  for (double& v : w.values()) v = normal(rng);
  return {parameter(std::move(w)), parameter(Tensor({cout}, 0.0))};
}

struct CellRange {
  int y0, y1, x0, x1;
  int count() const { return (y1 - y0) * (x1 - x0); }
};

// Feature-cell range of bin `b` out of `k` along one axis of a continuous
// interval [lo, hi) in feature coordinates, clipped to [0, extent).
std::pair<int, int> bin_span(double lo, double hi, int b, int k, int extent) {
  const double size = (hi - lo) / k;
  int s = static_cast<int>(std::floor(lo + b * size));
  int e = static_cast<int>(std::ceil(lo + (b + 1) * size));
  s = std::clamp(s, 0, extent - 1);
  e = std::clamp(e, 0, extent);
  if (e <= s) e = s + 1;
  return {s, e};
}

}  // namespace

Box clip_box(const Box& box, double width, double height) {
  const double x0 = std::clamp(box.x, 0.0, width);
  const double y0 = std::clamp(box.y, 0.0, height);
  const double x1 = std::clamp(box.right(), 0.0, width);
  const double y1 = std::clamp(box.bottom(), 0.0, height);
  return {x0, y0, std::max(0.0, x1 - x0), std::max(0.0, y1 - y0)};
}

double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.right(), b.right()) - std::max(a.x, b.x);
  const double ih = std::min(a.bottom(), b.bottom()) - std::max(a.y, b.y);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

std::vector<Box> generate_anchors(int fm_h, int fm_w, int stride, std::span<const double> scales,
                                  std::span<const double> ratios) {
  if (scales.empty() || ratios.empty()) throw ConfigError("anchors: empty scales or ratios");
  if (fm_h < 1 || fm_w < 1 || stride < 1) throw ConfigError("anchors: bad feature map geometry");
  std::vector<Box> shapes;
  for (double s : scales) {
    if (!(s > 0.0)) throw ConfigError("anchors: scales must be positive");
    for (double r : ratios) {
      if (!(r > 0.0)) throw ConfigError("anchors: ratios must be positive");
      const double area = (s * stride) * (s * stride);
      shapes.push_back({0.0, 0.0, std::sqrt(area / r), std::sqrt(area * r)});
    }
  }
  std::vector<Box> anchors;
  anchors.reserve(static_cast<std::size_t>(fm_h) * fm_w * shapes.size());
  for (int i = 0; i < fm_h; ++i) {
    for (int j = 0; j < fm_w; ++j) {
      const double cx = (j + 0.5) * stride;
      const double cy = (i + 0.5) * stride;
      for (const Box& s : shapes) anchors.push_back({cx - 0.5 * s.w, cy - 0.5 * s.h, s.w, s.h});
    }
  }
  return anchors;
}

BoxDelta encode_box(const Box& anchor, const Box& gt) {
  if (!(anchor.w > 0.0 && anchor.h > 0.0 && gt.w > 0.0 && gt.h > 0.0)) {
    throw DimensionError("encode_box: non-positive extent");
  }
  return {(gt.cx() - anchor.cx()) / anchor.w, (gt.cy() - anchor.cy()) / anchor.h,
          std::log(gt.w / anchor.w), std::log(gt.h / anchor.h)};
}

Box decode_box(const Box& anchor, const BoxDelta& d) {
  if (!(anchor.w > 0.0 && anchor.h > 0.0)) throw DimensionError("decode_box: non-positive extent");
  const double cx = anchor.cx() + d.tx * anchor.w;
  const double cy = anchor.cy() + d.ty * anchor.h;
  const double w = anchor.w * std::exp(std::min(d.tw, kMaxLogScale));
  const double h = anchor.h * std::exp(std::min(d.th, kMaxLogScale));
  return {cx - 0.5 * w, cy - 0.5 * h, w, h};
}

std::vector<AnchorAssignment> assign_anchors(std::span<const Box> anchors, std::span<const Box> gts,
                                             double pos_thr, double neg_thr) {
  if (!(neg_thr > 0.0 && pos_thr < 1.0 && pos_thr > neg_thr)) {
    throw ConfigError("assign_anchors: need 0 < neg_thr < pos_thr < 1");
  }
  std::vector<AnchorAssignment> out(anchors.size());
  std::vector<double> best_for_gt(gts.size(), 0.0);
  std::vector<int> best_anchor(gts.size(), -1);
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    AnchorAssignment& as = out[a];
    for (std::size_t gi = 0; gi < gts.size(); ++gi) {
      const double v = iou(anchors[a], gts[gi]);
      if (v > as.max_iou) {
        as.max_iou = v;
        as.gt_index = static_cast<int>(gi);
      }
      if (v > best_for_gt[gi]) {
        best_for_gt[gi] = v;
        best_anchor[gi] = static_cast<int>(a);
      }
    }
    if (as.gt_index >= 0 && as.max_iou >= pos_thr) {
      as.label = AnchorLabel::Positive;
    } else if (as.max_iou <= neg_thr) {
      as.label = AnchorLabel::Negative;
    } else {
      as.label = AnchorLabel::Ignore;
    }
  }
  for (std::size_t gi = 0; gi < gts.size(); ++gi) {
    if (best_anchor[gi] < 0) continue;
    AnchorAssignment& as = out[best_anchor[gi]];
    if (as.label != AnchorLabel::Positive) {
      as.label = AnchorLabel::Positive;
      as.gt_index = static_cast<int>(gi);
    }
  }
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    if (out[a].label == AnchorLabel::Positive) {
      out[a].target = encode_box(anchors[a], gts[out[a].gt_index]);
    }
  }
  return out;
}

std::vector<int> sample_assignments(std::span<const AnchorAssignment> assignments, int batch,
                                    double pos_fraction, std::mt19937_64& rng) {
  std::vector<int> pos, neg;
  for (std::size_t i = 0; i < assignments.size(); ++i) {
    if (assignments[i].label == AnchorLabel::Positive) pos.push_back(static_cast<int>(i));
    if (assignments[i].label == AnchorLabel::Negative) neg.push_back(static_cast<int>(i));
  }
  const auto max_pos = static_cast<std::size_t>(std::floor(batch * pos_fraction));
  if (pos.size() > max_pos) {
    std::shuffle(pos.begin(), pos.end(), rng);
    pos.resize(max_pos);
  }
  const std::size_t want_neg = static_cast<std::size_t>(batch) - pos.size();
  if (neg.size() > want_neg) {
    std::shuffle(neg.begin(), neg.end(), rng);
    neg.resize(want_neg);
  }
  std::vector<int> sample(pos);
  sample.insert(sample.end(), neg.begin(), neg.end());
  std::sort(sample.begin(), sample.end());
  return sample;
}

DetectionLoss detection_loss(Graph& g, const Var& cls_logits, const Var& reg_preds,
                             std::span<const AnchorAssignment> assignments,
                             std::span<const int> sample, double gamma) {
  if (sample.empty()) throw ConfigError("detection_loss: empty sample");
  if (gamma < 0.0) throw ConfigError("detection_loss: gamma must be >= 0");
  std::vector<int> targets;
  std::vector<double> weights;
  Tensor reg_target({static_cast<int>(sample.size()), 4});
  for (std::size_t i = 0; i < sample.size(); ++i) {
    const AnchorAssignment& as = assignments[sample[i]];
    if (as.label == AnchorLabel::Ignore) throw ConfigError("detection_loss: ignored row sampled");
    const bool positive = as.label == AnchorLabel::Positive;
    targets.push_back(positive ? 1 : 0);
    weights.push_back(positive ? 1.0 : 0.0);
    reg_target[i * 4 + 0] = as.target.tx;
    reg_target[i * 4 + 1] = as.target.ty;
    reg_target[i * 4 + 2] = as.target.tw;
    reg_target[i * 4 + 3] = as.target.th;
  }
  Var cls = softmax_cross_entropy(g, gather_rows(g, cls_logits, sample), targets);
  Var reg = smooth_l1(g, gather_rows(g, reg_preds, sample), reg_target, weights,
                      static_cast<double>(sample.size()));
  DetectionLoss out;
  out.cls = cls->value.item();
  out.reg = reg->value.item();
  out.total = add(g, cls, scale(g, reg, gamma));
  return out;
}

std::vector<Detection> nms(std::vector<Detection> detections, double iou_thr) {
  std::stable_sort(detections.begin(), detections.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  std::vector<Detection> kept;
  for (const Detection& d : detections) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
      return iou(k.box, d.box) > iou_thr;
    });
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

PsRoiPoolResult ps_roi_pool(Graph& g, const Var& maps, std::span<const Box> boxes, int stride,
                            int k, int classes, double image_w, double image_h) {
  const Tensor& m = maps->value;
  if (k < 1 || classes < 1) throw ConfigError("ps_roi_pool: k and classes must be >= 1");
  if (m.rank() != 4 || m.dim(0) != 1 || m.dim(1) != k * k * classes) {
    throw DimensionError("ps_roi_pool: expected maps [1," + std::to_string(k * k * classes) +
                         ",H,W], got " + shape_string(m.shape()));
  }
  const int fh = m.dim(2), fw = m.dim(3);
  const std::size_t plane = static_cast<std::size_t>(fh) * fw;

  std::vector<int> kept;
  std::vector<CellRange> bins;  // k*k per kept box, row-major bins
  for (std::size_t r = 0; r < boxes.size(); ++r) {
    const Box b = clip_box(boxes[r], image_w, image_h);
    if (!(b.w > 0.0 && b.h > 0.0)) continue;
    kept.push_back(static_cast<int>(r));
    const double fx0 = b.x / stride, fx1 = b.right() / stride;
    const double fy0 = b.y / stride, fy1 = b.bottom() / stride;
    for (int i = 0; i < k; ++i) {
      const auto [ys, ye] = bin_span(fy0, fy1, i, k, fh);
      for (int j = 0; j < k; ++j) {
        const auto [xs, xe] = bin_span(fx0, fx1, j, k, fw);
        bins.push_back({ys, ye, xs, xe});
      }
    }
  }

  const int rows = static_cast<int>(kept.size());
  if (rows == 0) return {constant(Tensor({1, classes}, 0.0)), {}};
  Tensor out({rows, classes}, 0.0);
  const double vote = 1.0 / (k * k);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < classes; ++c) {
      double acc = 0.0;
      for (int b = 0; b < k * k; ++b) {
        const CellRange& cr = bins[static_cast<std::size_t>(r) * k * k + b];
        const double* ch = m.data() + static_cast<std::size_t>(b * classes + c) * plane;
        double s = 0.0;
        for (int y = cr.y0; y < cr.y1; ++y) {
          for (int x = cr.x0; x < cr.x1; ++x) s += ch[static_cast<std::size_t>(y) * fw + x];
        }
        acc += s / cr.count();
      }
      out[static_cast<std::size_t>(r) * classes + c] = acc * vote;
    }
  }
  Var scores = g.record(std::move(out), {maps},
                        [maps, bins, rows, classes, k, fw, plane, vote](const Tensor& gout) {
                          Tensor& gm = maps->grad_buffer();
                          for (int r = 0; r < rows; ++r) {
                            for (int c = 0; c < classes; ++c) {
                              const double gr = gout[static_cast<std::size_t>(r) * classes + c] * vote;
                              for (int b = 0; b < k * k; ++b) {
                                const CellRange& cr = bins[static_cast<std::size_t>(r) * k * k + b];
                                double* ch = gm.data() + static_cast<std::size_t>(b * classes + c) * plane;
                                const double share = gr / cr.count();
                                for (int y = cr.y0; y < cr.y1; ++y) {
                                  for (int x = cr.x0; x < cr.x1; ++x) ch[static_cast<std::size_t>(y) * fw + x] += share;
                                }
                              }
                            }
                          }
                        });
  return {std::move(scores), std::move(kept)};
}

void DetectorConfig::validate() const {
  if (scales.empty() || ratios.empty()) throw ConfigError("detector: empty scales or ratios");
  if (head_channels < 1 || ps_k < 1) throw ConfigError("detector: bad head geometry");
  if (rpn_batch < 1 || roi_batch < 1) throw ConfigError("detector: batch sizes must be >= 1");
  if (!(rpn_pos_fraction > 0.0 && rpn_pos_fraction <= 1.0) ||
      !(roi_pos_fraction > 0.0 && roi_pos_fraction <= 1.0)) {
    throw ConfigError("detector: positive fractions must lie in (0, 1]");
  }
  if (pre_nms_top < 1 || post_nms_top < 1) throw ConfigError("detector: proposal counts must be >= 1");
}

DetectorParams init_detector(int in_channels, const DetectorConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  const int a = cfg.anchors_per_site();
  const int kk = cfg.ps_k * cfg.ps_k;
  DetectorParams p;
  p.hidden = init_head(in_channels, cfg.head_channels, 3,
                       std::sqrt(2.0 / (9.0 * in_channels)), rng);
  p.rpn_cls = init_head(cfg.head_channels, 2 * a, 1, 0.01, rng);
  p.rpn_reg = init_head(cfg.head_channels, 4 * a, 1, 0.01, rng);
  p.ps_cls = init_head(cfg.head_channels, 2 * kk, 1, 0.01, rng);
  p.ps_reg = init_head(cfg.head_channels, 4 * kk, 1, 0.01, rng);
  return p;
}

void collect_parameters(const DetectorParams& p, std::vector<NamedParam>& out) {
  const std::pair<const char*, const ConvParams*> heads[] = {{"detector.hidden", &p.hidden},
                                                             {"detector.rpn_cls", &p.rpn_cls},
                                                             {"detector.rpn_reg", &p.rpn_reg},
                                                             {"detector.ps_cls", &p.ps_cls},
                                                             {"detector.ps_reg", &p.ps_reg}};
  for (const auto& [name, conv] : heads) {
    out.push_back({std::string(name) + ".weight", conv->weight});
    out.push_back({std::string(name) + ".bias", conv->bias});
  }
}

DetectorOutputs detector_forward(Graph& g, const Var& features, const DetectorParams& p,
                                 const DetectorConfig&) {
  const Tensor& f = features->value;
  if (f.rank() != 4 || f.dim(0) != 1) {
    throw DimensionError("detector: features must be [1,C,H,W], got " + shape_string(f.shape()));
  }
  Var hidden = relu(g, conv2d(g, features, p.hidden.weight, p.hidden.bias, 1, 1));
  DetectorOutputs out;
  out.fm_h = f.dim(2);
  out.fm_w = f.dim(3);
  out.rpn_cls = to_rows(g, conv2d(g, hidden, p.rpn_cls.weight, p.rpn_cls.bias, 1, 0), 2);
  out.rpn_reg = to_rows(g, conv2d(g, hidden, p.rpn_reg.weight, p.rpn_reg.bias, 1, 0), 4);
  out.ps_cls = conv2d(g, hidden, p.ps_cls.weight, p.ps_cls.bias, 1, 0);
  out.ps_reg = conv2d(g, hidden, p.ps_reg.weight, p.ps_reg.bias, 1, 0);
  return out;
}

std::vector<Detection> propose(const DetectorOutputs& out, std::span<const Box> anchors,
                               const DetectorConfig& cfg, double image_w, double image_h) {
  const Tensor& cls = out.rpn_cls->value;
  const Tensor& reg = out.rpn_reg->value;
  if (cls.dim(0) != static_cast<int>(anchors.size())) {
    throw DimensionError("propose: anchor count does not match RPN rows");
  }
  std::vector<int> order(anchors.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> scores(anchors.size());
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    scores[a] = text_probability(cls[2 * a], cls[2 * a + 1]);
  }
  const std::size_t top = std::min<std::size_t>(cfg.pre_nms_top, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(top), order.end(),
                    [&](int a, int b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); });
  std::vector<Detection> props;
  for (std::size_t i = 0; i < top; ++i) {
    const int a = order[i];
    const BoxDelta d{reg[4 * a], reg[4 * a + 1], reg[4 * a + 2], reg[4 * a + 3]};
    const Box b = clip_box(decode_box(anchors[a], d), image_w, image_h);
    if (b.w >= 1.0 && b.h >= 1.0) props.push_back({b, scores[a]});
  }
  props = nms(std::move(props), cfg.proposal_nms);
  if (static_cast<int>(props.size()) > cfg.post_nms_top) props.resize(cfg.post_nms_top);
  return props;
}

std::vector<Detection> detect(Graph& g, const Var& features, const DetectorParams& params,
                              const DetectorConfig& cfg, int stride, double image_w,
                              double image_h, double score_threshold) {
  const DetectorOutputs out = detector_forward(g, features, params, cfg);
  const std::vector<Box> anchors =
      generate_anchors(out.fm_h, out.fm_w, stride, cfg.scales, cfg.ratios);
  const std::vector<Detection> props = propose(out, anchors, cfg, image_w, image_h);
  if (props.empty()) return {};
  std::vector<Box> boxes;
  for (const Detection& d : props) boxes.push_back(d.box);
  const PsRoiPoolResult cls = ps_roi_pool(g, out.ps_cls, boxes, stride, cfg.ps_k, 2, image_w, image_h);
  const PsRoiPoolResult reg = ps_roi_pool(g, out.ps_reg, boxes, stride, cfg.ps_k, 4, image_w, image_h);
  std::vector<Detection> dets;
  for (std::size_t r = 0; r < cls.kept.size(); ++r) {
    const Tensor& c = cls.scores->value;
    const Tensor& t = reg.scores->value;
    const double score = text_probability(c[2 * r], c[2 * r + 1]);
    const BoxDelta d{t[4 * r], t[4 * r + 1], t[4 * r + 2], t[4 * r + 3]};
    const Box refined = clip_box(decode_box(boxes[cls.kept[r]], d), image_w, image_h);
    if (refined.w >= 1.0 && refined.h >= 1.0) dets.push_back({refined, score});
  }
  dets = nms(std::move(dets), cfg.nms_iou);
  std::erase_if(dets, [&](const Detection& d) { return d.score < score_threshold; });
  return dets;
}

DetectorLoss detector_loss(Graph& g, const DetectorOutputs& out, std::span<const Box> gts,
                           const DetectorConfig& cfg, int stride, double image_w, double image_h,
                           double gamma, std::mt19937_64& rng) {
  const std::vector<Box> anchors =
      generate_anchors(out.fm_h, out.fm_w, stride, cfg.scales, cfg.ratios);
  const auto rpn_assign = assign_anchors(anchors, gts, cfg.rpn_pos_iou, cfg.rpn_neg_iou);
  const auto rpn_sample = sample_assignments(rpn_assign, cfg.rpn_batch, cfg.rpn_pos_fraction, rng);
  DetectionLoss rpn = detection_loss(g, out.rpn_cls, out.rpn_reg, rpn_assign, rpn_sample, gamma);

  DetectorLoss result;
  result.total = rpn.total;
  result.cls = rpn.cls;
  result.reg = rpn.reg;

  // Second stage trains on current proposals plus the ground truths.
  std::vector<Box> rois;
  for (const Detection& d : propose(out, anchors, cfg, image_w, image_h)) rois.push_back(d.box);
  rois.insert(rois.end(), gts.begin(), gts.end());
  const auto roi_assign = assign_anchors(rois, gts, cfg.roi_pos_iou, cfg.roi_neg_iou);
  const auto roi_sample = sample_assignments(roi_assign, cfg.roi_batch, cfg.roi_pos_fraction, rng);
  if (roi_sample.empty()) return result;
  std::vector<Box> sampled;
  std::vector<AnchorAssignment> sampled_assign;
  for (int i : roi_sample) {
    sampled.push_back(rois[i]);
    sampled_assign.push_back(roi_assign[i]);
  }
  const PsRoiPoolResult cls = ps_roi_pool(g, out.ps_cls, sampled, stride, cfg.ps_k, 2, image_w, image_h);
  const PsRoiPoolResult reg = ps_roi_pool(g, out.ps_reg, sampled, stride, cfg.ps_k, 4, image_w, image_h);
  if (cls.kept.empty()) return result;
  std::vector<AnchorAssignment> kept_assign;
  for (int i : cls.kept) kept_assign.push_back(sampled_assign[i]);
  std::vector<int> rows(kept_assign.size());
  std::iota(rows.begin(), rows.end(), 0);
  DetectionLoss second = detection_loss(g, cls.scores, reg.scores, kept_assign, rows, gamma);
  result.total = add(g, result.total, second.total);
  result.cls += second.cls;
  result.reg += second.reg;
  return result;
}

}  // namespace sharedtext
