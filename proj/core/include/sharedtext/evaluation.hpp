#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sharedtext/backbone.hpp"
#include "sharedtext/detector.hpp"
#include "sharedtext/recognizer.hpp"
#include "sharedtext/text_pool.hpp"

namespace sharedtext {

struct TextDetection {
  Box box;
  std::string text;
  double score = 0.0;
};

struct GroundTruthLine {
  Box box;
  std::string text;
};

struct EndToEndResult {
  std::vector<std::pair<int, int>> matches;  // (detection index, gt index), correct pairs only
  int correct = 0;
  int detections = 0;
  int ground_truths = 0;
  double recall = 0.0;
  double accuracy = 0.0;  // precision over emitted lines
  double f_measure = 0.0;
};

double f_measure(double precision, double recall);

// Detections are visited by descending score (input order on ties); each
// takes the unmatched gt with the highest IoU among those with IoU > iou_thr
// and an identical transcription.
EndToEndResult match_end_to_end(std::span<const TextDetection> detections,
                                std::span<const GroundTruthLine> gts, double iou_thr = 0.5);

// Totals over several images; rates are recomputed from summed counts.
EndToEndResult accumulate(std::span<const EndToEndResult> per_image);

struct ScoredBox {
  Box box;
  double score = 0.0;
  int image = 0;  // detections only match gts of the same image
};

struct GtBox {
  Box box;
  int image = 0;
};

// All-points interpolated area under the precision/recall curve. Empty when
// there are no ground truths.
std::optional<double> average_precision(std::span<const ScoredBox> detections,
                                        std::span<const GtBox> gts, double iou_thr = 0.5);

struct DetectionCounts {
  int true_positives = 0;
  int detections = 0;
  int ground_truths = 0;
  double recall() const;
  double precision() const;
};

// One-to-one matching on IoU only, by descending score.
DetectionCounts match_detections(std::span<const ScoredBox> detections, std::span<const GtBox> gts,
                                 double iou_thr = 0.5);

template <typename T>
std::size_t edit_distance(std::span<const T> a, std::span<const T> b) {
  std::vector<std::size_t> row(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) row[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    std::size_t diag = row[0];
    row[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t up = row[j];
      row[j] = std::min({row[j] + 1, row[j - 1] + 1, diag + (a[i - 1] == b[j - 1] ? 0 : 1)});
      diag = up;
    }
  }
  return row[b.size()];
}

std::vector<std::string> split_words(const std::string& text);

// Word-level edit distance over the reference length. Throws NumericError
// for an empty reference.
double wer(std::span<const std::string> ref_words, std::span<const std::string> hyp_words);
double wer(const std::string& ref, const std::string& hyp);

struct SeqCharAccuracy {
  double seq = 0.0;
  double chr = 0.0;
};

SeqCharAccuracy seq_char_accuracy(std::span<const std::pair<std::string, std::string>> gt_hyp);

struct TimingStats {
  double median = 0.0;
  double mad = 0.0;  // median absolute deviation
  int runs = 0;
};

TimingStats timing_stats(std::vector<double> seconds);

struct SavingRow {
  std::optional<std::string> boundary;
  std::uint64_t shared_flops = 0;
  std::uint64_t standalone_flops = 0;
  double saving_percent = 0.0;
  TimingStats recognition_time;  // recognition stage with this boundary
  double speedup = 1.0;          // no-sharing median over this median
};

struct SavingReport {
  int height = 0;
  int width = 0;
  TimingStats baseline_time;
  std::vector<SavingRow> rows;
};

struct RecognitionStageSetup {
  TextPoolConfig pool;
  RecognizerConfig recognizer;
  int num_classes = 13;
  // Line regions recognised per image, in input pixels.
  std::vector<Box> regions;
};

// Seconds for one recognition stage: the recognizer branch from the shared
// features (the whole trunk when nothing is shared), then pooling and the
// FCR head for every region.
double time_recognition_stage(const BackboneConfig& cfg, const RecognitionStageSetup& setup,
                              int height, int width, std::uint64_t seed);

// timing_runs == 0 skips the wall-clock measurement.
SavingReport saving_report(const BackboneConfig& cfg,
                           std::span<const std::optional<std::string>> boundaries, int height,
                           int width, int timing_runs, const RecognitionStageSetup& setup,
                           std::uint64_t seed = 1);

}  // namespace sharedtext
