#include <cmath>
#include <limits>
#include <random>

#include "doctest.h"
#include "helpers.hpp"
#include "sharedtext/errors.hpp"
#include "sharedtext/grad_check.hpp"
#include "sharedtext/ops.hpp"
#include "sharedtext/optim.hpp"

using namespace sharedtext;
using sharedtext::testing::random_param;
using sharedtext::testing::random_tensor;

namespace {

// Moves values away from 0 so relu and max kinks sit far from the FD step.
Tensor away_from_kinks(Tensor t, double gap = 0.05) {
  for (double& v : t.values()) {
    if (std::abs(v) < gap) v = v < 0 ? -gap : gap;
  }
  return t;
}

// Values with distinct magnitudes so max pooling has a clear winner.
Tensor distinct_values(Shape shape, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::vector<double> v(t.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.1 * static_cast<double>(i) - 0.05 * v.size();
  std::shuffle(v.begin(), v.end(), rng);
  for (std::size_t i = 0; i < v.size(); ++i) t[i] = v[i];
  return t;
}

}  // namespace

TEST_CASE("tensor construction checks shape against data") {
  CHECK(Tensor({2, 3}).size() == 6);
  CHECK_THROWS_AS(Tensor({2, 0}), DimensionError);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>(3)), DimensionError);
  const Var p = parameter(Tensor({2, 2}, 1.0));
  CHECK(p->requires_grad);
  CHECK(p->grad_buffer().shape() == p->value.shape());
}

TEST_CASE("conv2d of ones over ones is nine") {
  Graph g;
  const Var x = constant(Tensor({1, 1, 3, 3}, 1.0));
  const Var w = constant(Tensor({1, 1, 3, 3}, 1.0));
  const Var b = constant(Tensor({1}, 0.0));
  const Var y = conv2d(g, x, w, b, 1, 0);
  REQUIRE(y->value.shape() == Shape{1, 1, 1, 1});
  CHECK(y->value[0] == 9.0);
}

TEST_CASE("conv2d with a centre-one kernel and pad 1 is the identity") {
  std::mt19937_64 rng(3);
  Graph g;
  const Tensor in = random_tensor({1, 1, 5, 4}, rng);
  Tensor k({1, 1, 3, 3}, 0.0);
  k[4] = 1.0;
  const Var y = conv2d(g, constant(in), constant(k), constant(Tensor({1}, 0.0)), 1, 1);
  CHECK(y->value == in);
}

TEST_CASE("conv2d matches the direct loop on random geometries") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 30; ++trial) {
    const int n = 1 + trial % 2, cin = 1 + trial % 3, cout = 1 + trial % 4;
    const int k = 1 + trial % 3, stride = 1 + trial % 2;
    const ConvGeometry geom{stride, trial % 2, (trial / 2) % 2};
    const int h = k + 2 + trial % 5, w = k + 1 + trial % 4;
    const Tensor x = random_tensor({n, cin, h, w}, rng);
    const Tensor wt = random_tensor({cout, cin, k, k}, rng);
    const Tensor b = random_tensor({cout}, rng);
    Graph g;
    const Tensor fast = conv2d(g, constant(x), constant(wt), constant(b), geom)->value;
    const Tensor ref = conv2d_direct(x, wt, b, geom);
    REQUIRE(fast.shape() == ref.shape());
    for (std::size_t i = 0; i < fast.size(); ++i) {
      CHECK(std::abs(fast[i] - ref[i]) <= 1e-12 * std::max(1.0, std::abs(ref[i])));
    }
  }
}

TEST_CASE("conv2d rejects bad shapes and non-finite input") {
  Graph g;
  const Var b = constant(Tensor({1}, 0.0));
  CHECK_THROWS_AS(conv2d(g, constant(Tensor({1, 2, 4, 4})), constant(Tensor({1, 1, 3, 3})), b, 1, 0),
                  DimensionError);
  CHECK_THROWS_AS(conv2d(g, constant(Tensor({1, 1, 2, 2})), constant(Tensor({1, 1, 3, 3})), b, 1, 0),
                  DimensionError);
  Tensor bad({1, 1, 3, 3}, 0.0);
  bad[4] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(conv2d(g, constant(bad), constant(Tensor({1, 1, 3, 3})), b, 1, 0), NumericError);
}

TEST_CASE("conv2d gradient of sum matches finite differences") {
  std::mt19937_64 rng(5);
  const std::vector<Var> in{random_param({2, 3, 8, 8}, rng), random_param({4, 3, 3, 3}, rng),
                            random_param({4}, rng)};
  const double err = grad_check(
      [](Graph& g, std::span<const Var> v) { return sum(g, conv2d(g, v[0], v[1], v[2], 1, 1)); }, in);
  CHECK(err <= 1e-6);
}

TEST_CASE("maxpool picks the maximum and routes gradient to it") {
  Graph g;
  const Var x = parameter(Tensor({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4}));
  const MaxPoolResult r = maxpool2d(g, x, 2, 2);
  REQUIRE(r.output->value.size() == 1);
  CHECK(r.output->value[0] == 4.0);
  g.backward(sum(g, r.output));
  CHECK(x->grad == Tensor({1, 1, 2, 2}, std::vector<double>{0, 0, 0, 1}));
}

TEST_CASE("maxpool ties go to the first element in row-major order") {
  Graph g;
  const Var x = parameter(Tensor({1, 1, 2, 2}, 7.0));
  g.backward(sum(g, maxpool2d(g, x, 2, 2).output));
  CHECK(x->grad == Tensor({1, 1, 2, 2}, std::vector<double>{1, 0, 0, 0}));
}

TEST_CASE("maxpool rejects non-positive window or stride") {
  Graph g;
  const Var x = constant(Tensor({1, 1, 4, 4}));
  CHECK_THROWS_AS(maxpool2d(g, x, 0, 1), DimensionError);
  CHECK_THROWS_AS(maxpool2d(g, x, 2, 0), DimensionError);
}

TEST_CASE("relu subgradient at zero is zero") {
  Graph g;
  const Var x = parameter(Tensor({3}, std::vector<double>{-1.0, 0.0, 2.0}));
  g.backward(sum(g, relu(g, x)));
  CHECK(x->grad == Tensor({3}, std::vector<double>{0.0, 0.0, 1.0}));
}

TEST_CASE("grad_check reports tiny error for sum of squares") {
  std::mt19937_64 rng(1);
  const std::vector<Var> in{random_param({4, 5}, rng)};
  const double err =
      grad_check([](Graph& g, std::span<const Var> v) { return sum(g, mul(g, v[0], v[0])); }, in);
  CHECK(err <= 1e-8);
}

TEST_CASE("grad_check flags a gradient scaled by two") {
  std::mt19937_64 rng(2);
  const std::vector<Var> in{random_param({6}, rng, 0.5, 1.5)};
  auto doubled = [](Graph& g, std::span<const Var> v) {
    const Var x = v[0];
    Tensor out = Tensor::scalar(0.0);
    for (double e : x->value.values()) out[0] += e * e;
    return g.record(out, {x}, [x](const Tensor& gout) {
      Tensor& gx = x->grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gout[0] * 4.0 * x->value[i];
    });
  };
  CHECK(grad_check(doubled, in) >= 0.5);
}

TEST_CASE("grad_check throws on non-finite values") {
  const std::vector<Var> in{parameter(Tensor({2}, 1.0))};
  auto blowup = [](Graph& g, std::span<const Var> v) {
    return scale(g, sum(g, v[0]), std::numeric_limits<double>::infinity());
  };
  CHECK_THROWS_AS(grad_check(blowup, in), NumericError);
}

TEST_CASE("every primitive passes finite differences on 20 random instances") {
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 20; ++trial) {
    CAPTURE(trial);
    const Var a = parameter(away_from_kinks(random_tensor({2, 3, 4, 4}, rng)));
    const Var b = random_param({2, 3, 4, 4}, rng);
    const Var c = random_param({2, 2, 4, 4}, rng);
    const Tensor weights = random_tensor({2, 3, 4, 4}, rng);

    // Weighted sums keep each op's gradient non-uniform.
    auto wsum = [&](Graph& g, const Var& x) {
      if (x->value.shape() == weights.shape()) return sum(g, mul(g, x, constant(weights)));
      return sum(g, mul(g, x, x));
    };

    CHECK(grad_check([&](Graph& g, std::span<const Var> v) { return wsum(g, relu(g, v[0])); },
                     std::vector<Var>{a}) <= 1e-6);
    CHECK(grad_check([&](Graph& g, std::span<const Var> v) { return wsum(g, add(g, v[0], v[1])); },
                     std::vector<Var>{a, b}) <= 1e-6);
    CHECK(grad_check([&](Graph& g, std::span<const Var> v) { return wsum(g, mul(g, v[0], v[1])); },
                     std::vector<Var>{a, b}) <= 1e-6);
    CHECK(grad_check(
              [&](Graph& g, std::span<const Var> v) {
                return sum(g, mul(g, reshape(g, v[0], {6, 16}), constant(weights.reshaped({6, 16}))));
              },
              std::vector<Var>{b}) <= 1e-6);
    CHECK(grad_check(
              [&](Graph& g, std::span<const Var> v) {
                const Var cat = concat_channels(g, std::vector<Var>{v[0], v[1]});
                return sum(g, mul(g, cat, cat));
              },
              std::vector<Var>{b, c}) <= 1e-6);

    const Var x = random_param({5, 7}, rng);
    const Var w = random_param({3, 7}, rng);
    const Var bias = random_param({3}, rng);
    CHECK(grad_check(
              [](Graph& g, std::span<const Var> v) {
                const Var y = affine(g, v[0], v[1], v[2]);
                return sum(g, mul(g, y, y));
              },
              std::vector<Var>{x, w, bias}) <= 1e-6);

    const Var logits = random_param({6, 4}, rng, -2.0, 2.0);
    const Tensor lw = random_tensor({6, 4}, rng);
    CHECK(grad_check(
              [&](Graph& g, std::span<const Var> v) {
                return sum(g, mul(g, log_softmax(g, v[0]), constant(lw)));
              },
              std::vector<Var>{logits}) <= 1e-6);
    const std::vector<int> targets{0, 3, 1, 2, 2, 0};
    CHECK(grad_check([&](Graph& g, std::span<const Var> v) { return softmax_cross_entropy(g, v[0], targets); },
                     std::vector<Var>{logits}) <= 1e-6);

    // Smooth-L1 away from its |d| = 1 kink.
    Tensor target = random_tensor({6, 4}, rng);
    Tensor pred_v = random_tensor({6, 4}, rng, -3.0, 3.0);
    for (std::size_t i = 0; i < pred_v.size(); ++i) {
      if (std::abs(std::abs(pred_v[i] - target[i]) - 1.0) < 0.05) pred_v[i] += 0.2;
    }
    const std::vector<double> rw{1, 0, 1, 1, 0.5, 2};
    CHECK(grad_check([&](Graph& g, std::span<const Var> v) { return smooth_l1(g, v[0], target, rw, 3.0); },
                     std::vector<Var>{parameter(pred_v)}) <= 1e-6);

    const Var pool_in = parameter(distinct_values({1, 2, 6, 6}, rng));
    CHECK(grad_check([&](Graph& g, std::span<const Var> v) {
                       const Var y = maxpool2d(g, v[0], 2, 2).output;
                       return sum(g, mul(g, y, y));
                     },
                     std::vector<Var>{pool_in}) <= 1e-6);

    const Var map = random_param({1, 6, 2, 3}, rng);
    const Tensor rows_w = random_tensor({12, 3}, rng);
    CHECK(grad_check(
              [&](Graph& g, std::span<const Var> v) {
                return sum(g, mul(g, to_rows(g, v[0], 3), constant(rows_w)));
              },
              std::vector<Var>{map}) <= 1e-6);
    const std::vector<int> pick{0, 5, 5, 11};
    CHECK(grad_check(
              [&](Graph& g, std::span<const Var> v) {
                const Var r = gather_rows(g, to_rows(g, v[0], 3), pick);
                return sum(g, mul(g, r, r));
              },
              std::vector<Var>{map}) <= 1e-6);
  }
}

TEST_CASE("log_softmax rows normalise") {
  std::mt19937_64 rng(9);
  Graph g;
  const Var y = log_softmax(g, constant(random_tensor({3, 5, 2, 2}, rng, -20.0, 20.0)));
  for (int n = 0; n < 3; ++n) {
    for (int s = 0; s < 4; ++s) {
      double total = 0.0;
      for (int c = 0; c < 5; ++c) total += std::exp(y->value[(n * 5 + c) * 4 + s]);
      CHECK(std::abs(std::log(total)) <= 1e-9);
    }
  }
}

TEST_CASE("forward ops are pure") {
  std::mt19937_64 rng(4);
  const Tensor x = random_tensor({1, 2, 6, 6}, rng);
  const Tensor w = random_tensor({3, 2, 3, 3}, rng);
  const Tensor b = random_tensor({3}, rng);
  Graph g1, g2;
  const Tensor a = conv2d(g1, constant(x), constant(w), constant(b), 1, 1)->value;
  const Tensor c = conv2d(g2, constant(x), constant(w), constant(b), 1, 1)->value;
  CHECK(a == c);
}

TEST_CASE("graph backward runs once") {
  Graph g;
  const Var x = parameter(Tensor({2}, 1.0));
  const Var y = sum(g, mul(g, x, x));
  g.backward(y);
  CHECK_THROWS_AS(g.backward(y), StateError);
}

TEST_CASE("non-recording graph builds no tape") {
  Graph g(false);
  const Var x = parameter(Tensor({2}, 1.0));
  const Var y = sum(g, mul(g, x, x));
  CHECK(g.op_count() == 0);
  CHECK_FALSE(y->requires_grad);
  CHECK(y->value.item() == 2.0);
}

TEST_CASE("adam with zero gradient leaves parameters unchanged") {
  Tensor p({3}, std::vector<double>{1.0, -2.0, 0.5});
  const Tensor before = p;
  AdamMoments m;
  adam_update(p, Tensor({3}, 0.0), m, AdamConfig{});
  CHECK(p == before);
  CHECK(m.t == 1);
}

TEST_CASE("adam first step moves by about lr") {
  const AdamConfig cfg;
  for (double grad : {3.0, -0.02, 1e-3}) {
    Tensor p = Tensor::scalar(1.0);
    AdamMoments m;
    adam_update(p, Tensor::scalar(grad), m, cfg);
    const double expected = cfg.lr * std::abs(grad) / (std::abs(grad) + cfg.eps);
    CHECK(std::abs(std::abs(p[0] - 1.0) - expected) <= 1e-15);
    CHECK((p[0] - 1.0) * grad < 0.0);
  }
}

TEST_CASE("adam is deterministic and validates its config") {
  auto run = [] {
    std::mt19937_64 rng(8);
    const Var p = random_param({4, 4}, rng);
    AdamState state;
    for (int step = 0; step < 5; ++step) {
      Graph g;
      p->zero_grad();
      g.backward(sum(g, mul(g, p, p)));
      adam_step(std::vector<NamedParam>{{"p", p}}, state, AdamConfig{});
    }
    return p->value;
  };
  CHECK(run() == run());
  CHECK_THROWS_AS(validate(AdamConfig{0.0}), ConfigError);
  CHECK_THROWS_AS(validate(AdamConfig{1e-3, 1.0}), ConfigError);
  CHECK_THROWS_AS(validate(AdamConfig{1e-3, 0.9, 0.999, 0.0}), ConfigError);
}
