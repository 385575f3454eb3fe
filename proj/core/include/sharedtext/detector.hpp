#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "sharedtext/backbone.hpp"
#include "sharedtext/tensor.hpp"

namespace sharedtext {

// Axis-aligned box in image pixels, (x, y) being the top-left corner.
struct Box {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;

  double right() const noexcept { return x + w; }
  double bottom() const noexcept { return y + h; }
  double cx() const noexcept { return x + 0.5 * w; }
  double cy() const noexcept { return y + 0.5 * h; }
  double area() const noexcept { return w * h; }

  friend bool operator==(const Box&, const Box&) = default;
};

// Intersection of `box` with [0,width] x [0,height]; extents may become 0.
Box clip_box(const Box& box, double width, double height);

double iou(const Box& a, const Box& b);

// One box per (site, scale, ratio), ordered site-major (row, then column),
// then by scale, then by ratio. Ratios are h:w. An anchor of scale s has area
// (s * stride)^2 and is centred on ((j + 0.5) * stride, (i + 0.5) * stride).
std::vector<Box> generate_anchors(int fm_h, int fm_w, int stride, std::span<const double> scales,
                                  std::span<const double> ratios);

struct BoxDelta {
  double tx = 0.0;
  double ty = 0.0;
  double tw = 0.0;
  double th = 0.0;
};

BoxDelta encode_box(const Box& anchor, const Box& gt);
Box decode_box(const Box& anchor, const BoxDelta& delta);

enum class AnchorLabel : std::int8_t { Ignore = -1, Negative = 0, Positive = 1 };

struct AnchorAssignment {
  AnchorLabel label = AnchorLabel::Negative;
  BoxDelta target;
  int gt_index = -1;
  double max_iou = 0.0;
};

// Positive when IoU >= pos_thr with some ground truth or when the anchor is a
// ground truth's best match; negative when max IoU <= neg_thr; else ignored.
std::vector<AnchorAssignment> assign_anchors(std::span<const Box> anchors, std::span<const Box> gts,
                                             double pos_thr = 0.7, double neg_thr = 0.3);

// Random subset of at most `batch` non-ignored indices with at most
// pos_fraction * batch positives. Returned in ascending index order.
std::vector<int> sample_assignments(std::span<const AnchorAssignment> assignments, int batch,
                                    double pos_fraction, std::mt19937_64& rng);

struct DetectionLoss {
  Var total;
  double cls = 0.0;
  double reg = 0.0;
};

// L_det = L_cls + gamma * c* L_reg over the sampled rows. cls_logits [R,2]
// and reg_preds [R,4] are indexed like `assignments`; both terms are
// averaged over the sample size.
DetectionLoss detection_loss(Graph& g, const Var& cls_logits, const Var& reg_preds,
                             std::span<const AnchorAssignment> assignments,
                             std::span<const int> sample, double gamma = 1.0);

struct Detection {
  Box box;
  double score = 0.0;
};

// Greedy suppression by descending score; ties keep input order.
std::vector<Detection> nms(std::vector<Detection> detections, double iou_thr = 0.3);

struct PsRoiPoolResult {
  Var scores;                // [kept, classes]
  std::vector<int> kept;     // indices into the input boxes
};

// Position-sensitive RoI average pooling. maps is [1, k*k*classes, H, W]; bin
// (i, j) of a box reads only channel group i*k + j, and the k*k bin values are
// averaged per class. Boxes are clipped to the image; boxes with no area left
// are skipped.
PsRoiPoolResult ps_roi_pool(Graph& g, const Var& maps, std::span<const Box> boxes, int stride,
                            int k, int classes, double image_w, double image_h);

struct DetectorConfig {
  std::vector<double> scales{4.0, 8.0, 16.0};
  std::vector<double> ratios{1.0 / 2.0, 1.0 / 5.0, 1.0 / 10.0};
  int head_channels = 64;
  int ps_k = 3;
  int rpn_batch = 128;
  double rpn_pos_fraction = 0.5;
  double rpn_pos_iou = 0.7;
  double rpn_neg_iou = 0.3;
  int pre_nms_top = 100;
  double proposal_nms = 0.7;
  int post_nms_top = 30;
  int roi_batch = 64;
  double roi_pos_fraction = 0.25;
  double roi_pos_iou = 0.5;
  double roi_neg_iou = 0.3;
  double nms_iou = 0.3;
  double score_threshold = 0.5;

  int anchors_per_site() const { return static_cast<int>(scales.size() * ratios.size()); }
  void validate() const;
};

struct DetectorParams {
  ConvParams hidden;   // 3x3 conv shared by the proposal and scoring heads
  ConvParams rpn_cls;  // 1x1 -> 2 logits per anchor
  ConvParams rpn_reg;  // 1x1 -> 4 deltas per anchor
  ConvParams ps_cls;   // 1x1 -> k*k*2 position-sensitive score maps
  ConvParams ps_reg;   // 1x1 -> k*k*4 position-sensitive regression maps
};

DetectorParams init_detector(int in_channels, const DetectorConfig& cfg, std::mt19937_64& rng);
void collect_parameters(const DetectorParams& params, std::vector<NamedParam>& out);

struct DetectorOutputs {
  Var rpn_cls;  // [anchors, 2]
  Var rpn_reg;  // [anchors, 4]
  Var ps_cls;   // [1, k*k*2, H, W]
  Var ps_reg;   // [1, k*k*4, H, W]
  int fm_h = 0;
  int fm_w = 0;
};

DetectorOutputs detector_forward(Graph& g, const Var& features, const DetectorParams& params,
                                 const DetectorConfig& cfg);

// RPN proposals: decoded, clipped, top pre_nms_top by score, NMS at
// proposal_nms, at most post_nms_top survivors.
std::vector<Detection> propose(const DetectorOutputs& out, std::span<const Box> anchors,
                               const DetectorConfig& cfg, double image_w, double image_h);

// Second stage over proposals: ps-RoI scoring and one refinement pass, NMS,
// then score threshold. Boxes are clipped to the image.
std::vector<Detection> detect(Graph& g, const Var& features, const DetectorParams& params,
                              const DetectorConfig& cfg, int stride, double image_w,
                              double image_h, double score_threshold);

struct DetectorLoss {
  Var total;      // RPN L_det + second-stage L_det
  double cls = 0.0;
  double reg = 0.0;
};

// Loss of both detection stages for one image.
DetectorLoss detector_loss(Graph& g, const DetectorOutputs& out, std::span<const Box> gts,
                           const DetectorConfig& cfg, int stride, double image_w, double image_h,
                           double gamma, std::mt19937_64& rng);

}  // namespace sharedtext
