#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "sharedtext/config.hpp"

namespace sharedtext::cli {

// Options every command accepts.
struct CommonOptions {
  std::optional<std::filesystem::path> config;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;  // key=value, applied after the file
  std::filesystem::path out = ".";
};

struct GenDataOptions {
  CommonOptions common;
  std::optional<int> n;
};

struct TrainOptions {
  CommonOptions common;
  std::optional<std::filesystem::path> data;
  std::optional<std::string> strategy;
  std::optional<std::filesystem::path> resume;
};

struct EvalOptions {
  CommonOptions common;
  std::filesystem::path checkpoint;
  std::optional<std::filesystem::path> data;
  std::string split = "test";
};

struct InferOptions {
  CommonOptions common;
  std::filesystem::path checkpoint;
  std::filesystem::path image;
  bool svg = true;
};

struct BenchOptions {
  CommonOptions common;
  std::optional<std::filesystem::path> data;
  std::optional<int> runs;
  bool ablation = false;  // also train and evaluate every boundary x strategy
};

// Each returns a process exit code; diagnostics go to `err`.
int gen_data(const GenDataOptions& opts, std::ostream& out, std::ostream& err);
int train(const TrainOptions& opts, std::ostream& out, std::ostream& err);
int eval(const EvalOptions& opts, std::ostream& out, std::ostream& err);
int infer(const InferOptions& opts, std::ostream& out, std::ostream& err);
int bench(const BenchOptions& opts, std::ostream& out, std::ostream& err);

RunConfig resolve_config(const CommonOptions& common);

// Column sets of the CSV files written by the commands.
const std::vector<std::string>& metrics_columns();
const std::vector<std::string>& eval_columns();
const std::vector<std::string>& saving_columns();
const std::vector<std::string>& ablation_columns();

// Six significant digits.
std::string format_float(double v);
// Writes to a sibling temporary file, then renames over `path`.
void write_atomic(const std::filesystem::path& path, const std::string& content);

}  // namespace sharedtext::cli
