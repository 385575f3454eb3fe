#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"
#include "sharedtext/errors.hpp"
#include "sharedtext/evaluation.hpp"

using namespace sharedtext;

namespace {

const Box kA{0, 0, 40, 10}, kB{0, 30, 40, 10}, kC{0, 60, 40, 10};

std::vector<std::string> words(const std::string& s) { return split_words(s); }

}  // namespace

TEST_CASE("f-measure") {
  CHECK(f_measure(1.0, 1.0) == 1.0);
  CHECK(f_measure(0.0, 0.0) == 0.0);
  CHECK(f_measure(0.5, 1.0) == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("perfect end-to-end output") {
  const std::vector<TextDetection> d{{kA, "AB", 0.9}, {kB, "CD", 0.8}};
  const std::vector<GroundTruthLine> g{{kA, "AB"}, {kB, "CD"}};
  const EndToEndResult r = match_end_to_end(d, g);
  CHECK(r.correct == 2);
  CHECK(r.recall == 1.0);
  CHECK(r.accuracy == 1.0);
  CHECK(r.f_measure == 1.0);
}

TEST_CASE("a single wrong character rejects a perfect box") {
  const std::vector<TextDetection> d{{kA, "ABD", 0.9}};
  const std::vector<GroundTruthLine> g{{kA, "ABC"}};
  const EndToEndResult r = match_end_to_end(d, g);
  CHECK(r.correct == 0);
  CHECK(r.recall == 0.0);
  CHECK(r.accuracy == 0.0);
  CHECK(r.f_measure == 0.0);
}

TEST_CASE("IoU must exceed the threshold strictly") {
  // IoU exactly 0.5: half-width box inside the gt.
  const std::vector<TextDetection> d{{{0, 0, 20, 10}, "AB", 0.9}};
  const std::vector<GroundTruthLine> g{{kA, "AB"}};
  CHECK(iou(d[0].box, kA) == 0.5);
  CHECK(match_end_to_end(d, g).correct == 0);
  CHECK(match_end_to_end(d, g, 0.49).correct == 1);
}

TEST_CASE("two detections on one line give one hit and one false positive") {
  const std::vector<TextDetection> d{{kA, "AB", 0.9}, {{1, 0, 40, 10}, "AB", 0.8}};
  const std::vector<GroundTruthLine> g{{kA, "AB"}};
  const EndToEndResult r = match_end_to_end(d, g);
  CHECK(r.correct == 1);
  CHECK(r.matches == std::vector<std::pair<int, int>>{{0, 0}});
  CHECK(r.recall == 1.0);
  CHECK(r.accuracy == 0.5);
}

TEST_CASE("end-to-end matching ignores gt order") {
  std::mt19937_64 rng(51);
  std::vector<TextDetection> d{{kA, "AB", 0.9}, {kB, "XX", 0.7}, {kC, "EF", 0.5}, {{2, 1, 40, 10}, "AB", 0.3}};
  std::vector<GroundTruthLine> g{{kA, "AB"}, {kB, "CD"}, {kC, "EF"}};
  const int want = match_end_to_end(d, g).correct;
  for (int i = 0; i < 10; ++i) {
    std::shuffle(g.begin(), g.end(), rng);
    CHECK(match_end_to_end(d, g).correct == want);
  }
}

TEST_CASE("accumulate recomputes rates from counts") {
  const std::vector<TextDetection> d1{{kA, "AB", 0.9}};
  const std::vector<GroundTruthLine> g1{{kA, "AB"}, {kB, "CD"}};
  const std::vector<TextDetection> d2{{kA, "AB", 0.9}, {kB, "QQ", 0.8}};
  const std::vector<GroundTruthLine> g2{{kA, "AB"}};
  const std::vector<EndToEndResult> parts{match_end_to_end(d1, g1), match_end_to_end(d2, g2)};
  const EndToEndResult t = accumulate(parts);
  CHECK(t.correct == 2);
  CHECK(t.detections == 3);
  CHECK(t.ground_truths == 3);
  CHECK(t.recall == doctest::Approx(2.0 / 3.0));
  CHECK(t.accuracy == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("average precision examples") {
  const std::vector<GtBox> one{{kA, 0}};
  const std::vector<ScoredBox> exact{{kA, 0.7, 0}};
  CHECK(average_precision(exact, one) == 1.0);
  const std::vector<ScoredBox> off{{{100, 100, 5, 5}, 0.9, 0}};
  CHECK(average_precision(off, one) == 0.0);
  const std::vector<GtBox> two{{kA, 0}, {kB, 0}};
  const std::vector<ScoredBox> three{{kA, 0.9, 0}, {kC, 0.8, 0}, {kB, 0.7, 0}};
  CHECK(std::abs(*average_precision(three, two) - (0.5 + 0.5 * 2.0 / 3.0)) <= 1e-12);
  CHECK_FALSE(average_precision(three, std::span<const GtBox>{}).has_value());
}

TEST_CASE("average precision respects image identity") {
  const std::vector<GtBox> g{{kA, 0}};
  const std::vector<ScoredBox> other_image{{kA, 0.9, 1}};
  CHECK(average_precision(other_image, g) == 0.0);
}

TEST_CASE("average precision is invariant to monotone score rescaling") {
  std::mt19937_64 rng(52);
  std::uniform_real_distribution<double> u(0.0, 1.0), xy(0.0, 100.0);
  std::vector<GtBox> g;
  std::vector<ScoredBox> d;
  for (int i = 0; i < 30; ++i) g.push_back({{xy(rng), xy(rng), 30, 10}, i % 3});
  for (int i = 0; i < 60; ++i) {
    const GtBox& near = g[i % g.size()];
    d.push_back({{near.box.x + 8 * u(rng) - 4, near.box.y + 4 * u(rng) - 2, 30, 10}, u(rng), near.image});
  }
  const double base = *average_precision(d, g);
  for (ScoredBox& s : d) s.score = std::exp(3.0 * s.score) - 7.0;
  CHECK(*average_precision(d, g) == doctest::Approx(base).epsilon(1e-15));
}

TEST_CASE("detection counts") {
  const std::vector<GtBox> g{{kA, 0}, {kB, 0}};
  const std::vector<ScoredBox> d{{kA, 0.9, 0}, {kA, 0.8, 0}, {kC, 0.7, 0}};
  const DetectionCounts c = match_detections(d, g);
  CHECK(c.true_positives == 1);
  CHECK(c.recall() == 0.5);
  CHECK(c.precision() == doctest::Approx(1.0 / 3.0));
  const DetectionCounts none = match_detections(std::span<const ScoredBox>{}, std::span<const GtBox>{});
  CHECK(none.recall() == 0.0);
  CHECK(none.precision() == 0.0);
}

TEST_CASE("word error rate examples") {
  CHECK(wer("the cat sat", "the cat sat") == 0.0);
  CHECK(wer("the cat sat", "the cat") == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(wer("a b", "") == 1.0);
  CHECK_THROWS_AS(wer("", "a"), NumericError);
  CHECK(words("  a\tb  c ") == std::vector<std::string>{"a", "b", "c"});
}

TEST_CASE("word error rate bounds") {
  std::mt19937_64 rng(53);
  const std::vector<std::string> vocab{"AB", "C", "DEF", "G"};
  std::uniform_int_distribution<int> len(1, 6), pick(0, 3);
  for (int i = 0; i < 200; ++i) {
    std::vector<std::string> a(len(rng)), b(len(rng) - 1);
    for (auto& w : a) w = vocab[pick(rng)];
    for (auto& w : b) w = vocab[pick(rng)];
    CHECK(wer(a, a) == 0.0);
    CHECK(wer(a, b) <= static_cast<double>(a.size() + b.size()) / a.size());
  }
}

TEST_CASE("sequence and character accuracy examples") {
  using P = std::pair<std::string, std::string>;
  const std::vector<P> exact{{"ABC", "ABC"}, {"D", "D"}};
  CHECK(seq_char_accuracy(exact).seq == 1.0);
  CHECK(seq_char_accuracy(exact).chr == 1.0);
  const std::vector<P> sub{{"abc", "abd"}};
  CHECK(seq_char_accuracy(sub).seq == 0.0);
  CHECK(seq_char_accuracy(sub).chr == doctest::Approx(2.0 / 3.0));
  const std::vector<P> gone{{"ab", ""}};
  CHECK(seq_char_accuracy(gone).chr == 0.0);
  const std::vector<P> noisy{{"ab", "xxxxxx"}};
  CHECK(seq_char_accuracy(noisy).chr == 0.0);  // floored
}

TEST_CASE("edit distance") {
  const std::string a = "kitten", b = "sitting";
  CHECK(edit_distance(std::span<const char>(a), std::span<const char>(b)) == 3);
  CHECK(edit_distance(std::span<const char>(a), std::span<const char>()) == 6);
}

TEST_CASE("timing stats use median and median absolute deviation") {
  const TimingStats t = timing_stats({5.0, 1.0, 3.0, 2.0, 100.0});
  CHECK(t.runs == 5);
  CHECK(t.median == 3.0);
  CHECK(t.mad == 2.0);  // deviations 2, 2, 0, 1, 97
  CHECK(timing_stats({1.0, 3.0}).median == 2.0);
}

TEST_CASE("saving report rows follow the analytic counts") {
  const BackboneConfig cfg = vgg16_prefix();
  const auto boundaries = ablation_boundaries();
  RecognitionStageSetup setup;
  const SavingReport r = saving_report(cfg, boundaries, 64, 96, 0, setup);
  REQUIRE(r.rows.size() == boundaries.size());
  CHECK_FALSE(r.rows.front().boundary.has_value());
  CHECK(r.rows.front().saving_percent == 0.0);
  CHECK(r.rows.front().speedup == 1.0);
  double prev = -1.0;
  for (const SavingRow& row : r.rows) {
    CHECK(row.saving_percent > prev);
    prev = row.saving_percent;
    CHECK(row.standalone_flops == flop_count(cfg, std::nullopt, "conv4_3", 64, 96));
    CHECK(row.saving_percent ==
          doctest::Approx(100.0 * row.shared_flops / row.standalone_flops).epsilon(1e-12));
  }
  CHECK(r.rows.back().saving_percent == 100.0);
}

TEST_CASE("saving report timing runs are recorded") {
  RecognitionStageSetup setup;
  setup.regions = {{8, 8, 48, 16}};
  const std::vector<std::optional<std::string>> b{std::nullopt, std::string("conv4_3")};
  const SavingReport r = saving_report(vgg16_prefix(), b, 32, 64, 3, setup);
  CHECK(r.baseline_time.runs == 3);
  for (const SavingRow& row : r.rows) {
    CHECK(row.recognition_time.runs == 3);
    CHECK(row.recognition_time.median > 0.0);
    CHECK(row.speedup > 0.0);
  }
}
