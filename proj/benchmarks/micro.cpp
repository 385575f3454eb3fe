#include <benchmark/benchmark.h>

#include <random>

#include "sharedtext/config.hpp"
#include "sharedtext/joint_model.hpp"
#include "sharedtext/ops.hpp"

using namespace sharedtext;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = u(rng);
  return t;
}

void BM_Conv3x3(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0));
  const Var x = constant(random_tensor({1, c, 96, 128}, 1));
  const Var w = parameter(random_tensor({c, c, 3, 3}, 2));
  const Var b = parameter(Tensor({c}, 0.0));
  for (auto _ : state) {
    Graph g(false);
    benchmark::DoNotOptimize(conv2d(g, x, w, b, 1, 1)->value.data());
  }
}
BENCHMARK(BM_Conv3x3)->Arg(8)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_Conv3x3Backward(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0));
  const Var x = parameter(random_tensor({1, c, 96, 128}, 1));
  const Var w = parameter(random_tensor({c, c, 3, 3}, 2));
  const Var b = parameter(Tensor({c}, 0.0));
  for (auto _ : state) {
    Graph g;
    g.backward(sum(g, conv2d(g, x, w, b, 1, 1)));
    x->zero_grad();
    w->zero_grad();
    b->zero_grad();
  }
}
BENCHMARK(BM_Conv3x3Backward)->Arg(8)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_CtcForwardBackward(benchmark::State& state) {
  const int frames = static_cast<int>(state.range(0));
  Graph g(false);
  const Tensor lp = log_softmax(g, constant(random_tensor({frames, 13}, 3)))->value;
  std::vector<int> label;
  for (int i = 0; i < frames / 3; ++i) label.push_back(1 + i % 12);
  for (auto _ : state) benchmark::DoNotOptimize(ctc_forward_backward(lp, label).loss);
}
BENCHMARK(BM_CtcForwardBackward)->Arg(16)->Arg(64)->Arg(256);

void BM_TextPool(benchmark::State& state) {
  const Var f = constant(random_tensor({1, 64, 24, 32}, 4));
  for (auto _ : state) {
    Graph g(false);
    benchmark::DoNotOptimize(text_pool(g, f, Box{16, 40, 200, 24}, 8, {8}).data->value.data());
  }
}
BENCHMARK(BM_TextPool);

// Recognition stage per sharing boundary; index into ablation_boundaries().
void BM_RecognitionStage(benchmark::State& state) {
  const auto boundaries = ablation_boundaries();
  RunConfig cfg;
  cfg.sync();
  BackboneConfig bc = cfg.model.backbone;
  bc.sharing_boundary = boundaries[static_cast<std::size_t>(state.range(0))];
  auto rng = page_rng(cfg.seed, static_cast<int>(Split::Test), 0);
  const Sample page = render_page(cfg.page, rng);
  RecognitionStageSetup setup;
  setup.num_classes = static_cast<int>(cfg.model.alphabet.size()) + 1;
  for (const Annotation& a : page.annotations) setup.regions.push_back(a.box);
  // The call builds its own weights; only the stage itself is reported.
  for (auto _ : state) {
    state.SetIterationTime(time_recognition_stage(bc, setup, cfg.page.height, cfg.page.width, 1));
  }
  state.SetLabel(boundary_label(bc.sharing_boundary));
}
BENCHMARK(BM_RecognitionStage)->DenseRange(0, 4)->UseManualTime()->Unit(benchmark::kMillisecond);

void BM_EndToEndInfer(benchmark::State& state) {
  RunConfig cfg;
  cfg.sync();
  const Model m = init_model(cfg.model, 1);
  auto rng = page_rng(cfg.seed, static_cast<int>(Split::Test), 0);
  const Sample page = render_page(cfg.page, rng);
  for (auto _ : state) benchmark::DoNotOptimize(end_to_end_infer(page.image, m).size());
}
BENCHMARK(BM_EndToEndInfer)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
