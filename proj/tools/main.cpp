#include <iostream>

#include "CLI11.hpp"
#include "commands.hpp"

namespace cli = sharedtext::cli;

namespace {

void add_common(CLI::App* app, cli::CommonOptions& c) {
  app->add_option("--config", c.config, "key = value config file");
  app->add_option("--seed", c.seed, "overrides the config seed");
  app->add_option("--set", c.overrides, "config override, key=value (repeatable)");
  app->add_option("--out", c.out, "output directory");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Shared-feature text detection and recognition"};
  app.require_subcommand(1);

  cli::GenDataOptions gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "render a synthetic dataset");
  add_common(gen_cmd, gen.common);
  gen_cmd->add_option("--n", gen.n, "number of pages (default data.count)");

  cli::TrainOptions tr;
  auto* train_cmd = app.add_subcommand("train", "train a model; writes model.ckpt and metrics.csv");
  add_common(train_cmd, tr.common);
  train_cmd->add_option("--data", tr.data, "dataset directory (default data.dir)");
  train_cmd->add_option("--strategy", tr.strategy, "joint or separate")->check(CLI::IsMember({"joint", "separate"}));
  train_cmd->add_option("--resume", tr.resume, "continue from a checkpoint");

  cli::EvalOptions ev;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint; writes eval.csv");
  add_common(eval_cmd, ev.common);
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "model checkpoint")->required();
  eval_cmd->add_option("--data", ev.data, "dataset directory (default data.dir)");
  eval_cmd->add_option("--split", ev.split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));

  cli::InferOptions inf;
  auto* infer_cmd = app.add_subcommand("infer", "detect and read text in one PGM image");
  add_common(infer_cmd, inf.common);
  infer_cmd->add_option("--checkpoint", inf.checkpoint, "model checkpoint")->required();
  infer_cmd->add_option("--image", inf.image, "binary PGM image")->required();
  infer_cmd->add_flag("!--no-svg", inf.svg, "skip the SVG overlay");

  cli::BenchOptions bn;
  auto* bench_cmd = app.add_subcommand("bench", "sharing ablation: FLOP saving, timing, accuracy table");
  add_common(bench_cmd, bn.common);
  bench_cmd->add_option("--data", bn.data, "dataset directory for --ablation (default data.dir)");
  bench_cmd->add_option("--runs", bn.runs, "timing repetitions (default bench.runs)");
  bench_cmd->add_flag("--ablation", bn.ablation, "train and evaluate every boundary x strategy");

  CLI11_PARSE(app, argc, argv);

  if (*gen_cmd) return cli::gen_data(gen, std::cout, std::cerr);
  if (*train_cmd) return cli::train(tr, std::cout, std::cerr);
  if (*eval_cmd) return cli::eval(ev, std::cout, std::cerr);
  if (*infer_cmd) return cli::infer(inf, std::cout, std::cerr);
  if (*bench_cmd) return cli::bench(bn, std::cout, std::cerr);
  return 1;
}
