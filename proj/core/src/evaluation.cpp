#include "sharedtext/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

#include "sharedtext/errors.hpp"
#include "sharedtext/ops.hpp"

namespace sharedtext {
namespace {

template <typename Scored>
std::vector<int> by_descending_score(std::span<const Scored> items) {
  std::vector<int> order(items.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return items[a].score > items[b].score; });
  return order;
}

// For each detection in score order: the best-IoU gt of its image, if any
// exceeds the threshold. Shared by AP and the count matcher.
struct GreedyMatch {
  std::vector<int> order;
  std::vector<bool> true_positive;
};

GreedyMatch greedy_box_match(std::span<const ScoredBox> dets, std::span<const GtBox> gts,
                             double iou_thr) {
  GreedyMatch m;
  m.order = by_descending_score(dets);
  std::vector<bool> taken(gts.size(), false);
  for (int d : m.order) {
    int best = -1;
    double best_iou = iou_thr;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (gts[g].image != dets[d].image || taken[g]) continue;
      const double o = iou(dets[d].box, gts[g].box);
      if (o > best_iou) {
        best_iou = o;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0) taken[best] = true;
    m.true_positive.push_back(best >= 0);
  }
  return m;
}

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

double f_measure(double p, double r) { return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

EndToEndResult match_end_to_end(std::span<const TextDetection> dets,
                                std::span<const GroundTruthLine> gts, double iou_thr) {
  EndToEndResult r;
  r.detections = static_cast<int>(dets.size());
  r.ground_truths = static_cast<int>(gts.size());
  std::vector<bool> taken(gts.size(), false);
  for (int d : by_descending_score(dets)) {
    int best = -1;
    double best_iou = iou_thr;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (taken[g] || gts[g].text != dets[d].text) continue;
      const double o = iou(dets[d].box, gts[g].box);
      if (o > best_iou) {
        best_iou = o;
        best = static_cast<int>(g);
      }
    }
    if (best < 0) continue;
    taken[best] = true;
    r.matches.emplace_back(d, best);
  }
  r.correct = static_cast<int>(r.matches.size());
  r.recall = r.ground_truths ? static_cast<double>(r.correct) / r.ground_truths : 0.0;
  r.accuracy = r.detections ? static_cast<double>(r.correct) / r.detections : 0.0;
  r.f_measure = f_measure(r.accuracy, r.recall);
  return r;
}

EndToEndResult accumulate(std::span<const EndToEndResult> per_image) {
  EndToEndResult t;
  for (const EndToEndResult& r : per_image) {
    t.correct += r.correct;
    t.detections += r.detections;
    t.ground_truths += r.ground_truths;
  }
  t.recall = t.ground_truths ? static_cast<double>(t.correct) / t.ground_truths : 0.0;
  t.accuracy = t.detections ? static_cast<double>(t.correct) / t.detections : 0.0;
  t.f_measure = f_measure(t.accuracy, t.recall);
  return t;
}

std::optional<double> average_precision(std::span<const ScoredBox> dets, std::span<const GtBox> gts,
                                        double iou_thr) {
  if (gts.empty()) return std::nullopt;
  const GreedyMatch m = greedy_box_match(dets, gts, iou_thr);
  std::vector<double> recall, precision;
  int tp = 0;
  for (std::size_t i = 0; i < m.order.size(); ++i) {
    tp += m.true_positive[i] ? 1 : 0;
    recall.push_back(static_cast<double>(tp) / gts.size());
    precision.push_back(static_cast<double>(tp) / (i + 1));
  }
  // Precision envelope from the right, then area over recall steps.
  for (int i = static_cast<int>(precision.size()) - 2; i >= 0; --i) {
    precision[i] = std::max(precision[i], precision[i + 1]);
  }
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t i = 0; i < recall.size(); ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

double DetectionCounts::recall() const {
  return ground_truths ? static_cast<double>(true_positives) / ground_truths : 0.0;
}

double DetectionCounts::precision() const {
  return detections ? static_cast<double>(true_positives) / detections : 0.0;
}

DetectionCounts match_detections(std::span<const ScoredBox> dets, std::span<const GtBox> gts,
                                 double iou_thr) {
  const GreedyMatch m = greedy_box_match(dets, gts, iou_thr);
  DetectionCounts c;
  c.detections = static_cast<int>(dets.size());
  c.ground_truths = static_cast<int>(gts.size());
  c.true_positives = static_cast<int>(std::count(m.true_positive.begin(), m.true_positive.end(), true));
  return c;
}

std::vector<std::string> split_words(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> words;
  for (std::string w; in >> w;) words.push_back(w);
  return words;
}

double wer(std::span<const std::string> ref, std::span<const std::string> hyp) {
  if (ref.empty()) throw NumericError("wer: undefined for an empty reference");
  return static_cast<double>(edit_distance(ref, hyp)) / ref.size();
}

double wer(const std::string& ref, const std::string& hyp) {
  const auto r = split_words(ref), h = split_words(hyp);
  return wer(std::span<const std::string>(r), std::span<const std::string>(h));
}

SeqCharAccuracy seq_char_accuracy(std::span<const std::pair<std::string, std::string>> pairs) {
  if (pairs.empty()) return {};
  std::size_t exact = 0, dist = 0, total = 0;
  for (const auto& [gt, hyp] : pairs) {
    exact += gt == hyp ? 1 : 0;
    dist += edit_distance(std::span<const char>(gt), std::span<const char>(hyp));
    total += gt.size();
  }
  SeqCharAccuracy a;
  a.seq = static_cast<double>(exact) / pairs.size();
  if (total == 0) {
    a.chr = dist == 0 ? 1.0 : 0.0;
  } else {
    a.chr = std::max(0.0, 1.0 - static_cast<double>(dist) / total);
  }
  return a;
}

TimingStats timing_stats(std::vector<double> seconds) {
  TimingStats s;
  s.runs = static_cast<int>(seconds.size());
  if (seconds.empty()) return s;
  s.median = median_of(seconds);
  for (double& v : seconds) v = std::abs(v - s.median);
  s.mad = median_of(std::move(seconds));
  return s;
}

double time_recognition_stage(const BackboneConfig& cfg, const RecognitionStageSetup& setup,
                              int height, int width, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const BackboneParams bp = init_backbone(cfg, rng);
  const FcrParams fcr = init_fcr(cfg.output_channels(), setup.num_classes, setup.recognizer, rng);
  Tensor img({1, cfg.in_channels, height, width});
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (double& v : img.values()) v = u(rng);

  Graph g(false);
  // The shared prefix is paid for by detection, so it is outside the timer.
  const Var shared = forward_prefix(g, constant(std::move(img)), cfg, bp);
  const int stride = cfg.total_stride();
  const auto start = std::chrono::steady_clock::now();
  const Var features = forward_branch(g, shared, cfg, bp, Branch::Recognizer);
  for (const Box& region : setup.regions) {
    const PooledTextFeature pooled = text_pool(g, features, region, stride, setup.pool);
    const Var logits = fcr_forward(g, pooled.data, fcr, setup.recognizer);
    (void)log_softmax(g, logits);
  }
  const auto stop = std::chrono::steady_clock::now();
  return std::chrono::duration<double>(stop - start).count();
}

SavingReport saving_report(const BackboneConfig& cfg,
                           std::span<const std::optional<std::string>> boundaries, int height,
                           int width, int timing_runs, const RecognitionStageSetup& setup,
                           std::uint64_t seed) {
  cfg.validate();
  SavingReport rep;
  rep.height = height;
  rep.width = width;
  const std::string last = cfg.layers.back().name;
  const std::uint64_t standalone = flop_count(cfg, std::nullopt, last, height, width);

  auto measure = [&](const std::optional<std::string>& boundary) {
    BackboneConfig c = cfg;
    c.sharing_boundary = boundary;
    std::vector<double> runs;
    for (int i = 0; i < timing_runs; ++i) runs.push_back(time_recognition_stage(c, setup, height, width, seed));
    return timing_stats(std::move(runs));
  };
  rep.baseline_time = measure(std::nullopt);

  for (const auto& boundary : boundaries) {
    SavingRow row;
    row.boundary = boundary;
    row.standalone_flops = standalone;
    row.shared_flops = boundary ? flop_count(cfg, std::nullopt, *boundary, height, width) : 0;
    row.saving_percent = sharing_saving_percent(cfg, boundary, height, width);
    row.recognition_time = boundary ? measure(boundary) : rep.baseline_time;
    row.speedup = row.recognition_time.median > 0.0 ? rep.baseline_time.median / row.recognition_time.median : 1.0;
    if (!boundary) row.speedup = 1.0;
    rep.rows.push_back(row);
  }
  return rep;
}

}  // namespace sharedtext
