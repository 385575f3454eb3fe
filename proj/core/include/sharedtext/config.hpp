#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sharedtext/joint_model.hpp"
#include "sharedtext/synth_data.hpp"

namespace sharedtext {

// Everything a run needs, read from a flat `key = value` file. Lines starting
// with '#' are comments. Unknown keys are rejected.
struct RunConfig {
  std::uint64_t seed = 1;
  PageSpec page;
  int data_count = 750;
  SplitFractions split{0.8, 2.0 / 30.0};
  std::vector<int> widths{kDefaultVggWidths.begin(), kDefaultVggWidths.end()};
  ModelConfig model;
  TrainConfig train;
  int bench_runs = 21;
  std::vector<std::optional<std::string>> bench_boundaries = ablation_boundaries();
  std::string data_dir = "data";

  // Pushes shared settings (seed, widths, alphabet) into the sub-configs.
  void sync();
  void validate() const;
};

struct ConfigKey {
  std::string name;
  std::string help;
};

// Every recognised key with a one-line description, in file order.
const std::vector<ConfigKey>& config_keys();

// Applies one assignment; throws ConfigError for unknown keys or bad values.
void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value);
std::string get_config_value(const RunConfig& cfg, const std::string& key);

RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);
// Every key with its effective value; parse_config(format_config(c)) == c.
std::string format_config(const RunConfig& cfg);

}  // namespace sharedtext
