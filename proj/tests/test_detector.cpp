#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"
#include "helpers.hpp"
#include "sharedtext/detector.hpp"
#include "sharedtext/errors.hpp"
#include "sharedtext/grad_check.hpp"
#include "sharedtext/ops.hpp"
#include "sharedtext/synth_data.hpp"

using namespace sharedtext;
using sharedtext::testing::random_param;
using sharedtext::testing::random_tensor;

namespace {

double at4(const Tensor& t, int n, int c, int y, int x) {
  return t[((static_cast<std::size_t>(n) * t.dim(1) + c) * t.dim(2) + y) * t.dim(3) + x];
}

const std::vector<double> kScales{4.0, 8.0, 16.0};
const std::vector<double> kRatios{1.0 / 2.0, 1.0 / 5.0, 1.0 / 10.0};

Box random_box(std::mt19937_64& rng, double max_xy = 200.0, double max_wh = 150.0) {
  std::uniform_real_distribution<double> xy(-20.0, max_xy), wh(1.0, max_wh);
  return {xy(rng), xy(rng), wh(rng), wh(rng)};
}

double best_iou(const std::vector<Box>& anchors, const Box& b) {
  double best = 0.0;
  for (const Box& a : anchors) best = std::max(best, iou(a, b));
  return best;
}

// Scalar re-statement of the detection objective.
double loss_oracle(const Tensor& cls, const Tensor& reg, const std::vector<AnchorAssignment>& as,
                   const std::vector<int>& sample, double gamma) {
  double ce = 0.0, sl1 = 0.0;
  for (int r : sample) {
    const double l0 = cls[2 * r], l1 = cls[2 * r + 1];
    const double m = std::max(l0, l1);
    const double lse = m + std::log(std::exp(l0 - m) + std::exp(l1 - m));
    const bool pos = as[r].label == AnchorLabel::Positive;
    ce += lse - (pos ? l1 : l0);
    if (!pos) continue;
    const double t[4] = {as[r].target.tx, as[r].target.ty, as[r].target.tw, as[r].target.th};
    for (int j = 0; j < 4; ++j) {
      const double d = std::abs(reg[4 * r + j] - t[j]);
      sl1 += d < 1.0 ? 0.5 * d * d : d - 0.5;
    }
  }
  const double n = static_cast<double>(sample.size());
  return ce / n + gamma * sl1 / n;
}

struct LossFixture {
  std::vector<AnchorAssignment> assign;
  std::vector<int> sample;
};

LossFixture mixed_assignments(std::mt19937_64& rng, int rows) {
  LossFixture f;
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  for (int r = 0; r < rows; ++r) {
    AnchorAssignment a;
    a.label = r % 3 == 0 ? AnchorLabel::Positive : (r % 3 == 1 ? AnchorLabel::Negative : AnchorLabel::Ignore);
    if (a.label == AnchorLabel::Positive) a.target = {u(rng), u(rng), u(rng), u(rng)};
    f.assign.push_back(a);
    if (a.label != AnchorLabel::Ignore) f.sample.push_back(r);
  }
  return f;
}

// Cell span of bin b along an axis, written out independently of the pool.
std::pair<int, int> oracle_span(double lo, double hi, int b, int k, int extent) {
  const double step = (hi - lo) / k;
  int s = static_cast<int>(std::floor(lo + step * b));
  int e = static_cast<int>(std::ceil(lo + step * (b + 1)));
  s = std::max(0, std::min(s, extent - 1));
  e = std::max(0, std::min(e, extent));
  if (e <= s) e = s + 1;
  return {s, e};
}

double ps_oracle(const Tensor& m, const Box& raw, int stride, int k, int classes, int c, double iw,
                 double ih) {
  const Box b = clip_box(raw, iw, ih);
  const int fh = m.dim(2), fw = m.dim(3);
  double total = 0.0;
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < k; ++j) {
      const auto [y0, y1] = oracle_span(b.y / stride, b.bottom() / stride, i, k, fh);
      const auto [x0, x1] = oracle_span(b.x / stride, b.right() / stride, j, k, fw);
      const int ch = (i * k + j) * classes + c;
      double s = 0.0;
      int n = 0;
      for (int y = y0; y < y1; ++y) {
        for (int x = x0; x < x1; ++x) {
          s += at4(m, 0, ch, y, x);
          ++n;
        }
      }
      total += s / n;
    }
  }
  return total / (k * k);
}

}  // namespace

TEST_CASE("anchor count tiles every site") {
  CHECK(generate_anchors(4, 4, 8, kScales, kRatios).size() == 144);
  const std::vector<double> none;
  CHECK_THROWS_AS(generate_anchors(4, 4, 8, none, kRatios), ConfigError);
  CHECK_THROWS_AS(generate_anchors(4, 4, 8, kScales, none), ConfigError);
}

TEST_CASE("anchor geometry: area, ratio and centre") {
  const std::vector<double> s{4.0};
  const std::vector<double> r{0.5, 0.1};
  const auto a = generate_anchors(1, 2, 16, s, r);
  REQUIRE(a.size() == 4);
  CHECK(a[0].h == doctest::Approx(45.254834).epsilon(1e-8));
  CHECK(a[0].w == doctest::Approx(90.509668).epsilon(1e-8));
  CHECK(a[0].area() == doctest::Approx(4096.0));
  CHECK(a[1].w / a[0].w == doctest::Approx(std::sqrt(5.0)));
  CHECK(a[2].cx() == doctest::Approx(24.0));
  CHECK(a[2].cy() == doctest::Approx(8.0));
}

TEST_CASE("iou examples") {
  const Box a{0, 0, 10, 10};
  CHECK(iou(a, a) == 1.0);
  CHECK(iou(a, {20, 20, 5, 5}) == 0.0);
  CHECK(iou(a, {10, 0, 10, 10}) == 0.0);
  CHECK(iou(a, {5, 0, 10, 10}) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("box encoding examples") {
  const Box anchor{0, 0, 10, 10};
  const BoxDelta same = encode_box(anchor, anchor);
  CHECK(same.tx == 0.0);
  CHECK(same.ty == 0.0);
  CHECK(same.tw == 0.0);
  CHECK(same.th == 0.0);
  const BoxDelta d = encode_box(anchor, {5, 0, 10, 10});
  CHECK(d.tx == 0.5);
  CHECK(d.ty == 0.0);
  CHECK(d.tw == 0.0);
  CHECK(d.th == 0.0);
  CHECK_THROWS_AS(encode_box({0, 0, 0, 10}, anchor), DimensionError);
  CHECK_THROWS_AS(encode_box(anchor, {0, 0, 5, -1}), DimensionError);
}

TEST_CASE("decode inverts encode on random pairs") {
  std::mt19937_64 rng(11);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const Box a = random_box(rng), gt = random_box(rng);
    const Box back = decode_box(a, encode_box(a, gt));
    worst = std::max({worst, std::abs(back.x - gt.x), std::abs(back.y - gt.y), std::abs(back.w - gt.w),
                      std::abs(back.h - gt.h)});
  }
  CHECK(worst <= 1e-12);
}

TEST_CASE("anchor assignment rules") {
  const std::vector<Box> anchors{{0, 0, 10, 10}, {100, 100, 10, 10}, {3, 0, 10, 10}};
  SUBCASE("identical anchor is positive") {
    const std::vector<Box> gts{{0, 0, 10, 10}};
    const auto a = assign_anchors(anchors, gts);
    CHECK(a[0].label == AnchorLabel::Positive);
    CHECK(a[0].gt_index == 0);
    CHECK(a[1].label == AnchorLabel::Negative);
    CHECK(a[2].label == AnchorLabel::Ignore);  // IoU 7/13
  }
  SUBCASE("no ground truths makes everything negative") {
    const auto a = assign_anchors(anchors, std::span<const Box>{});
    for (const auto& x : a) CHECK(x.label == AnchorLabel::Negative);
  }
  SUBCASE("best match at IoU 0.5 is still positive") {
    const std::vector<Box> one{{0, 0, 10, 10}};
    const std::vector<Box> gts{{0, 0, 20, 10}};
    const auto a = assign_anchors(one, gts);
    CHECK(a[0].max_iou == doctest::Approx(0.5));
    CHECK(a[0].label == AnchorLabel::Positive);
    CHECK(a[0].target.tw == doctest::Approx(std::log(2.0)));
  }
  CHECK_THROWS_AS(assign_anchors(anchors, anchors, 0.3, 0.7), ConfigError);
}

TEST_CASE("sampling honours batch size and positive cap") {
  std::mt19937_64 rng(3);
  std::vector<AnchorAssignment> as(1000);
  for (int i = 0; i < 300; ++i) as[i].label = AnchorLabel::Positive;
  for (int i = 300; i < 400; ++i) as[i].label = AnchorLabel::Ignore;
  const auto s = sample_assignments(as, 128, 0.5, rng);
  CHECK(s.size() == 128);
  CHECK(std::is_sorted(s.begin(), s.end()));
  const auto pos = std::count_if(s.begin(), s.end(), [&](int i) { return as[i].label == AnchorLabel::Positive; });
  CHECK(pos == 64);
  for (int i : s) CHECK(as[i].label != AnchorLabel::Ignore);
}

TEST_CASE("detection loss matches the scalar oracle") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const LossFixture f = mixed_assignments(rng, 30);
    const Tensor cls = random_tensor({30, 2}, rng, -3.0, 3.0);
    const Tensor reg = random_tensor({30, 4}, rng, -3.0, 3.0);
    const double gamma = trial % 2 ? 1.0 : 0.37;
    Graph g;
    const DetectionLoss l = detection_loss(g, constant(cls), constant(reg), f.assign, f.sample, gamma);
    CHECK(std::abs(l.total->value.item() - loss_oracle(cls, reg, f.assign, f.sample, gamma)) <= 1e-9);
    CHECK(l.total->value.item() == doctest::Approx(l.cls + gamma * l.reg));
  }
}

TEST_CASE("all-negative sample leaves only the classification term") {
  std::mt19937_64 rng(8);
  std::vector<AnchorAssignment> as(10);
  const std::vector<int> sample{0, 2, 4, 6};
  Graph g;
  const DetectionLoss l = detection_loss(g, constant(random_tensor({10, 2}, rng)),
                                         constant(random_tensor({10, 4}, rng)), as, sample);
  CHECK(l.reg == 0.0);
  CHECK(l.total->value.item() == l.cls);
}

TEST_CASE("confident correct logits and exact regression drive the loss to zero") {
  std::vector<AnchorAssignment> as(2);
  as[0].label = AnchorLabel::Positive;
  as[0].target = {0.1, -0.2, 0.3, 0.0};
  Tensor cls({2, 2}, std::vector<double>{-50, 50, 50, -50});
  Tensor reg({2, 4}, std::vector<double>{0.1, -0.2, 0.3, 0.0, 9, 9, 9, 9});
  const std::vector<int> sample{0, 1};
  Graph g;
  CHECK(detection_loss(g, constant(cls), constant(reg), as, sample).total->value.item() < 1e-30);
}

TEST_CASE("detection loss errors") {
  std::vector<AnchorAssignment> as(2);
  as[1].label = AnchorLabel::Ignore;
  Graph g;
  const Var cls = constant(Tensor({2, 2})), reg = constant(Tensor({2, 4}));
  CHECK_THROWS_AS(detection_loss(g, cls, reg, as, std::span<const int>{}), ConfigError);
  const std::vector<int> bad{1};
  CHECK_THROWS_AS(detection_loss(g, cls, reg, as, bad), ConfigError);
}

TEST_CASE("detection loss gradient matches finite differences") {
  std::mt19937_64 rng(9);
  const LossFixture f = mixed_assignments(rng, 12);
  // Keep regression residuals off the smooth-L1 knee at |d| = 1.
  Tensor reg = random_tensor({12, 4}, rng, -0.6, 0.6);
  for (std::size_t i = 0; i < f.assign.size(); ++i) {
    const auto& t = f.assign[i].target;
    const double tv[4] = {t.tx, t.ty, t.tw, t.th};
    for (int j = 0; j < 4; ++j) {
      if (std::abs(std::abs(reg[4 * i + j] - tv[j]) - 1.0) < 0.05) reg[4 * i + j] += 0.2;
    }
  }
  const std::vector<Var> in{random_param({12, 2}, rng), parameter(reg)};
  const double err = grad_check(
      [&](Graph& g, std::span<const Var> v) {
        return detection_loss(g, v[0], v[1], f.assign, f.sample).total;
      },
      in);
  CHECK(err <= 1e-4);
}

TEST_CASE("nms examples") {
  CHECK(nms({{{0, 0, 10, 10}, 0.5}}).size() == 1);
  const auto same = nms({{{0, 0, 10, 10}, 0.8}, {{0, 0, 10, 10}, 0.9}});
  REQUIRE(same.size() == 1);
  CHECK(same[0].score == 0.9);
  CHECK(nms({{{0, 0, 10, 10}, 0.8}, {{50, 50, 10, 10}, 0.9}}).size() == 2);
  // IoU 1/3 exceeds 0.3, so the lower box goes.
  CHECK(nms({{{0, 0, 10, 10}, 0.8}, {{5, 0, 10, 10}, 0.9}}, 0.3).size() == 1);
  CHECK(nms({{{0, 0, 10, 10}, 0.8}, {{5, 0, 10, 10}, 0.9}}, 0.5).size() == 2);
}

TEST_CASE("nms result does not depend on input order") {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Detection> d;
    for (int i = 0; i < 40; ++i) d.push_back({random_box(rng, 100.0, 60.0), 0.01 * i + 0.001 * trial});
    const auto ref = nms(d);
    std::shuffle(d.begin(), d.end(), rng);
    const auto got = nms(d);
    REQUIRE(got.size() == ref.size());
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i].box == ref[i].box);
  }
}

TEST_CASE("ps-RoI pooling matches a naive oracle") {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 30; ++trial) {
    const int k = 3, classes = trial % 2 ? 2 : 4, stride = 8;
    const Tensor m = random_tensor({1, k * k * classes, 12, 16}, rng);
    std::vector<Box> boxes;
    for (int i = 0; i < 6; ++i) boxes.push_back(random_box(rng, 120.0, 100.0));
    Graph g;
    const PsRoiPoolResult r = ps_roi_pool(g, constant(m), boxes, stride, k, classes, 128, 96);
    for (std::size_t row = 0; row < r.kept.size(); ++row) {
      for (int c = 0; c < classes; ++c) {
        const double want = ps_oracle(m, boxes[r.kept[row]], stride, k, classes, c, 128, 96);
        CHECK(std::abs(r.scores->value[row * classes + c] - want) <= 1e-12);
      }
    }
  }
}

TEST_CASE("ps-RoI pooling with one bin is plain average pooling") {
  std::mt19937_64 rng(14);
  const Tensor m = random_tensor({1, 2, 6, 6}, rng);
  const std::vector<Box> b{{8, 16, 16, 8}};  // cells x 2..3, y 4
  Graph g;
  const PsRoiPoolResult r = ps_roi_pool(g, constant(m), b, 4, 1, 2, 24, 24);
  for (int c = 0; c < 2; ++c) {
    double want = 0.0;
    for (int y = 4; y < 6; ++y)
      for (int x = 2; x < 6; ++x) want += at4(m, 0, c, y, x);
    CHECK(r.scores->value[c] == doctest::Approx(want / 8.0).epsilon(1e-14));
  }
}

TEST_CASE("ps-RoI pooling of constant maps returns the constant") {
  const Tensor m({1, 9 * 2, 8, 8}, 0.625);
  const std::vector<Box> b{{3, 5, 30, 17}, {-10, -10, 30, 30}};
  Graph g;
  const PsRoiPoolResult r = ps_roi_pool(g, constant(m), b, 8, 3, 2, 64, 64);
  for (double v : r.scores->value.values()) CHECK(v == doctest::Approx(0.625).epsilon(1e-15));
}

TEST_CASE("ps-RoI pooling skips boxes with no area and checks channels") {
  Graph g;
  const std::vector<Box> b{{100, 100, 10, 10}, {0, 0, 8, 8}};
  const PsRoiPoolResult r = ps_roi_pool(g, constant(Tensor({1, 2, 4, 4}, 1.0)), b, 8, 1, 2, 32, 32);
  CHECK(r.kept == std::vector<int>{1});
  CHECK_THROWS_AS(ps_roi_pool(g, constant(Tensor({1, 5, 4, 4})), b, 8, 1, 2, 32, 32), DimensionError);
}

TEST_CASE("ps-RoI backward only touches contributing cells and channels") {
  std::mt19937_64 rng(15);
  const int k = 2, classes = 1;
  const Var m = random_param({1, k * k * classes, 8, 8}, rng);
  const std::vector<Box> b{{0, 0, 16, 16}};  // cells 0..1, each bin one cell
  Graph g;
  g.backward(sum(g, ps_roi_pool(g, m, b, 8, k, classes, 64, 64).scores));
  const Tensor& gr = m->grad;
  for (int ch = 0; ch < 4; ++ch) {
    const int by = ch / 2, bx = ch % 2;
    for (int y = 0; y < 8; ++y) {
      for (int x = 0; x < 8; ++x) {
        const double want = (y == by && x == bx) ? 0.25 : 0.0;
        CHECK(at4(gr, 0, ch, y, x) == want);
      }
    }
  }
  const std::vector<Var> in{m};
  const std::vector<Box> wide{{3, 5, 41, 27}};
  CHECK(grad_check(
            [&](Graph& gg, std::span<const Var> v) {
              return sum(gg, ps_roi_pool(gg, v[0], wide, 8, k, classes, 64, 64).scores);
            },
            in) <= 1e-6);
}

TEST_CASE("untrained detector output is well-formed and monotone in the threshold") {
  std::mt19937_64 rng(16);
  DetectorConfig cfg;
  const DetectorParams p = init_detector(8, cfg, rng);
  const Var features = constant(random_tensor({1, 8, 12, 16}, rng));
  std::size_t prev = SIZE_MAX;
  for (double thr : {0.0, 0.3, 0.5, 0.7, 0.99}) {
    Graph g(false);
    const auto d = detect(g, features, p, cfg, 8, 128, 96, thr);
    CHECK(d.size() <= prev);
    prev = d.size();
    for (const Detection& x : d) {
      CHECK(x.box.x >= 0.0);
      CHECK(x.box.y >= 0.0);
      CHECK(x.box.right() <= 128.0);
      CHECK(x.box.bottom() <= 96.0);
      CHECK(x.score >= thr);
      CHECK(x.score <= 1.0);
    }
  }
}

TEST_CASE("detector loss is finite and both stages contribute gradient") {
  std::mt19937_64 rng(17);
  DetectorConfig cfg;
  const DetectorParams p = init_detector(4, cfg, rng);
  Graph g;
  const DetectorOutputs out = detector_forward(g, constant(random_tensor({1, 4, 12, 16}, rng)), p, cfg);
  const std::vector<Box> gts{{10, 20, 60, 16}, {30, 60, 80, 20}};
  const DetectorLoss l = detector_loss(g, out, gts, cfg, 8, 128, 96, 1.0, rng);
  CHECK(std::isfinite(l.total->value.item()));
  g.backward(l.total);
  std::vector<NamedParam> params;
  collect_parameters(p, params);
  for (const NamedParam& n : params) {
    CAPTURE(n.name);
    double mass = 0.0;
    for (double v : n.var->grad.values()) mass += std::abs(v);
    CHECK(mass > 0.0);
  }
}

TEST_CASE("anchors cover every synthetic text line") {
  const int stride = 8;
  PageSpec spec;
  const auto anchors = generate_anchors(spec.height / stride, spec.width / stride, stride, kScales, kRatios);
  double worst = 1.0;
  for (int i = 0; i < 300; ++i) {
    std::mt19937_64 rng = page_rng(5, 0, i);
    for (const Annotation& a : render_page(spec, rng).annotations) worst = std::min(worst, best_iou(anchors, a.box));
  }
  CHECK(worst >= 0.3);
}

TEST_CASE("anchors cover the height and aspect band up to 2.5x the largest anchor area") {
  // Lines of height 2..16 strides and w:h 2..10, placed anywhere they fit,
  // whose area is at most 640 stride^2.
  const int stride = 8, fm = 200;
  const auto anchors = generate_anchors(fm, fm, stride, kScales, kRatios);
  std::mt19937_64 rng(18);
  std::uniform_real_distribution<double> hd(2.0 * stride, 16.0 * stride), rd(2.0, 10.0), u(0.0, 1.0);
  double worst = 1.0;
  int tested = 0;
  while (tested < 300) {
    const double h = hd(rng), w = h * rd(rng);
    if (w * h > 640.0 * stride * stride) continue;
    ++tested;
    const double room = fm * stride;
    const Box b{u(rng) * (room - w), u(rng) * (room - h), w, h};
    // Only anchors centred near the line can overlap it much.
    double best = 0.0;
    const int j0 = std::max(0, static_cast<int>(b.cx() / stride) - 2), j1 = std::min(fm, j0 + 5);
    const int i0 = std::max(0, static_cast<int>(b.cy() / stride) - 2), i1 = std::min(fm, i0 + 5);
    for (int y = i0; y < i1; ++y)
      for (int x = j0; x < j1; ++x)
        for (int a = 0; a < 9; ++a) best = std::max(best, iou(anchors[(y * fm + x) * 9 + a], b));
    worst = std::min(worst, best);
  }
  CHECK(worst >= 0.3);
}

TEST_CASE("tall and very wide lines fall outside anchor reach") {
  // 16 strides tall at 10:1 is 2560 stride^2; the best anchor is 16 x 1:10.
  const int stride = 8;
  const auto anchors = generate_anchors(60, 60, stride, kScales, kRatios);
  const Box line{100, 100, 160.0 * stride, 16.0 * stride};
  CHECK(best_iou(anchors, line) < 0.3);
}

TEST_CASE("detector config validation") {
  DetectorConfig c;
  c.scales.clear();
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = DetectorConfig{};
  c.rpn_pos_fraction = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = DetectorConfig{};
  c.ps_k = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}
