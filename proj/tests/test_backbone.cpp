#include <random>

#include "doctest.h"
#include "helpers.hpp"
#include "sharedtext/backbone.hpp"
#include "sharedtext/errors.hpp"
#include "sharedtext/ops.hpp"

using namespace sharedtext;
using sharedtext::testing::random_tensor;

namespace {

BackboneConfig single_conv(int cin, int cout) {
  BackboneConfig c;
  c.in_channels = cin;
  c.layers.push_back({"conv", LayerKind::Conv, 3, 1, 1, cout, true});
  return c;
}

}  // namespace

TEST_CASE("default prefix follows the VGG-16 naming and conventions") {
  const BackboneConfig c = vgg16_prefix();
  CHECK(c.conv_names() == std::vector<std::string>{"conv1_1", "conv1_2", "conv2_1", "conv2_2", "conv3_1",
                                                   "conv3_2", "conv3_3", "conv4_1", "conv4_2", "conv4_3"});
  for (const LayerSpec& l : c.layers) {
    if (l.kind == LayerKind::Conv) {
      CHECK((l.kernel == 3 && l.stride == 1 && l.pad == 1));
    } else {
      CHECK((l.kernel == 2 && l.stride == 2 && l.pad == 0));
    }
  }
  CHECK(c.total_stride() == 8);
  CHECK(c.output_channels() == 64);
}

TEST_CASE("config validation") {
  BackboneConfig c = vgg16_prefix();
  c.sharing_boundary = "conv9_9";
  CHECK_THROWS_AS(c.validate(), LookupError);
  c = vgg16_prefix();
  c.layers[1].name = c.layers[0].name;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK(parse_boundary("none") == std::nullopt);
  CHECK(parse_boundary("conv3_3") == std::optional<std::string>("conv3_3"));
  CHECK(boundary_label(std::nullopt) == "none");
}

TEST_CASE("receptive fields reproduce 14 at conv2_2 and 40 at conv3_3") {
  const BackboneConfig c = vgg16_prefix();
  CHECK(receptive_field(c, "conv2_2").size == 14);
  CHECK(receptive_field(c, "conv3_3").size == 40);
  CHECK(receptive_field(c, "conv3_3").jump == 4);
  const ReceptiveField one = receptive_field(single_conv(1, 1), "conv");
  CHECK(one.size == 3);
  CHECK(one.jump == 1);
  CHECK_THROWS_AS(receptive_field(c, "conv5_1"), LookupError);
}

TEST_CASE("receptive field does not depend on channel widths") {
  const std::array<int, 10> wide{64, 64, 128, 128, 256, 256, 256, 512, 512, 512};
  CHECK(receptive_field(vgg16_prefix(wide), "conv3_3").size == 40);
}

TEST_CASE("flop count closed forms") {
  // One 3x3 conv, 1 -> 1 channel, 4x4 output: 2*9*16 MACs plus 16 relu ops.
  BackboneConfig c = single_conv(1, 1);
  c.layers[0].relu = false;
  CHECK(flop_count(c, std::nullopt, "conv", 4, 4) == 288);
  c.layers[0].relu = true;
  CHECK(flop_count(c, std::nullopt, "conv", 4, 4) == 288 + 16);
}

TEST_CASE("flop count is additive over split points") {
  const BackboneConfig c = vgg16_prefix();
  const auto names = [&] {
    std::vector<std::string> n;
    for (const LayerSpec& l : c.layers) n.push_back(l.name);
    return n;
  }();
  for (std::size_t a = 0; a < names.size(); ++a) {
    for (std::size_t b = a; b < names.size(); ++b) {
      const auto whole = flop_count(c, std::nullopt, names[b], 192, 256);
      CHECK(whole == flop_count(c, std::nullopt, names[a], 192, 256) + flop_count(c, names[a], names[b], 192, 256));
    }
  }
  CHECK_THROWS_AS(flop_count(c, std::string("conv3_1"), "conv2_1", 64, 64), LookupError);
}

TEST_CASE("saving percentage matches the hand-computed default config") {
  // Page 192x256, widths 8,8 / 16,16 / 32,32,32 / 64,64,64, one input channel.
  const double s1 = 192.0 * 256, s2 = s1 / 4, s3 = s1 / 16, s4 = s1 / 64;
  const double conv1_1 = (2 * 9 * 1 * 8 + 8) * s1;
  const double conv1_2 = (2 * 9 * 8 * 8 + 8) * s1;
  const double pool1 = 8 * s2;
  const double conv2_1 = (2 * 9 * 8 * 16 + 16) * s2;
  const double conv2_2 = (2 * 9 * 16 * 16 + 16) * s2;
  const double pool2 = 16 * s3;
  const double conv3_1 = (2 * 9 * 16 * 32 + 32) * s3;
  const double conv3_x = (2 * 9 * 32 * 32 + 32) * s3;
  const double pool3 = 32 * s4;
  const double conv4_1 = (2 * 9 * 32 * 64 + 64) * s4;
  const double conv4_x = (2 * 9 * 64 * 64 + 64) * s4;
  const double total = conv1_1 + conv1_2 + pool1 + conv2_1 + conv2_2 + pool2 + conv3_1 + 2 * conv3_x +
                       pool3 + conv4_1 + 2 * conv4_x;
  const BackboneConfig c = vgg16_prefix();
  CHECK(static_cast<double>(flop_count(c, std::nullopt, "conv4_3", 192, 256)) == total);

  const std::map<std::string, double> prefix{
      {"conv1_2", conv1_1 + conv1_2},
      {"conv2_2", conv1_1 + conv1_2 + pool1 + conv2_1 + conv2_2},
      {"conv3_3", conv1_1 + conv1_2 + pool1 + conv2_1 + conv2_2 + pool2 + conv3_1 + 2 * conv3_x},
      {"conv4_3", total}};
  for (const auto& [name, flops] : prefix) {
    CAPTURE(name);
    CHECK(std::abs(sharing_saving_percent(c, name, 192, 256) - 100.0 * flops / total) <= 0.01);
  }
  CHECK(sharing_saving_percent(c, std::nullopt, 192, 256) == 0.0);
}

TEST_CASE("saving strictly increases over the ablation boundaries") {
  const BackboneConfig c = vgg16_prefix();
  double prev = -1.0;
  for (const auto& b : ablation_boundaries()) {
    const double s = sharing_saving_percent(c, b, 192, 256);
    CHECK(s > prev);
    CHECK(s >= 0.0);
    CHECK(s <= 100.0);
    prev = s;
  }
}

TEST_CASE("two pools before the boundary quarter the spatial size") {
  std::mt19937_64 rng(1);
  BackboneConfig c = vgg16_prefix();
  c.sharing_boundary = "pool2";
  const BackboneParams p = init_backbone(c, rng);
  Graph g(false);
  const BackboneFeatures f = forward_shared(g, constant(random_tensor({1, 1, 64, 64}, rng)), c, p);
  CHECK(f.shared->value.shape() == Shape{1, 16, 16, 16});
  CHECK(f.detector->value.shape() == Shape{1, 64, 8, 8});
  CHECK(f.recognizer->value.shape() == Shape{1, 64, 8, 8});
}

TEST_CASE("indivisible input is rejected") {
  std::mt19937_64 rng(1);
  const BackboneConfig c = vgg16_prefix();
  const BackboneParams p = init_backbone(c, rng);
  Graph g(false);
  CHECK_THROWS_AS(forward_shared(g, constant(Tensor({1, 1, 60, 64})), c, p), DimensionError);
}

TEST_CASE("without sharing each branch is a standalone trunk") {
  std::mt19937_64 rng(2);
  BackboneConfig c = vgg16_prefix();
  c.sharing_boundary.reset();
  const BackboneParams p = init_backbone(c, rng);
  CHECK(p.shared.empty());
  const Tensor img = random_tensor({1, 1, 32, 48}, rng);
  Graph g(false);
  const BackboneFeatures f = forward_shared(g, constant(img), c, p);
  const Var standalone = run_layers(g, constant(img), c, 0, c.layers.size(), p.detector);
  CHECK(f.detector->value == standalone->value);
  CHECK(f.detector->value != f.recognizer->value);
}

TEST_CASE("forward is deterministic and counts each stage once") {
  std::mt19937_64 rng(3);
  BackboneConfig c = vgg16_prefix();
  c.sharing_boundary = "conv1_2";
  const BackboneParams p = init_backbone(c, rng);
  const Tensor img = random_tensor({1, 1, 32, 32}, rng);
  ForwardCounters counters;
  Graph g1(false), g2(false);
  const BackboneFeatures a = forward_shared(g1, constant(img), c, p, &counters);
  const BackboneFeatures b = forward_shared(g2, constant(img), c, p);
  CHECK(a.detector->value == b.detector->value);
  CHECK(a.recognizer->value == b.recognizer->value);
  CHECK(counters.shared_prefix_runs == 1);
  CHECK(counters.detector_branch_runs == 1);
  CHECK(counters.recognizer_branch_runs == 1);
}

TEST_CASE("branch copies are independent and named by branch") {
  std::mt19937_64 rng(4);
  BackboneConfig shared = vgg16_prefix();
  shared.sharing_boundary = "conv2_2";
  const BackboneParams p = init_backbone(shared, rng);
  CHECK(p.shared.count("conv2_2") == 1);
  CHECK(p.shared.count("conv3_1") == 0);
  CHECK(p.detector.count("conv3_1") == 1);
  CHECK(p.recognizer.count("conv3_1") == 1);
  CHECK(p.detector.at("conv3_1").weight->value != p.recognizer.at("conv3_1").weight->value);
  std::vector<NamedParam> all, prefix;
  collect_parameters(p, all);
  collect_shared_parameters(p, prefix);
  CHECK(prefix.size() == 8);  // 4 convs x (weight, bias)
  CHECK(all.size() == prefix.size() + 2 * 12);
  bool found = false;
  for (const NamedParam& n : all) found |= n.name == "backbone.recognizer.conv4_3.weight";
  CHECK(found);
}

TEST_CASE("branch output depends only on the prefix and its own suffix") {
  std::mt19937_64 rng(5);
  BackboneConfig c = vgg16_prefix();
  c.sharing_boundary = "conv3_3";
  BackboneParams p = init_backbone(c, rng);
  const Tensor img = random_tensor({1, 1, 32, 32}, rng);
  Graph g(false);
  const Tensor before = forward_shared(g, constant(img), c, p).detector->value;
  // Perturbing the recognizer's suffix leaves the detector branch alone.
  for (auto& [name, conv] : p.recognizer) conv.weight->value.fill(0.25);
  CHECK(forward_shared(g, constant(img), c, p).detector->value == before);
  p.shared.at("conv1_1").bias->value.fill(0.5);
  CHECK(forward_shared(g, constant(img), c, p).detector->value != before);
}
