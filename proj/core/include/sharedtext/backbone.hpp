#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "sharedtext/optim.hpp"
#include "sharedtext/tensor.hpp"

namespace sharedtext {

enum class LayerKind { Conv, Pool };

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::Conv;
  int kernel = 3;
  int stride = 1;
  int pad = 1;
  int out_channels = 0;  // conv only
  bool relu = true;      // conv only
};

// Ordered layer stack plus the last layer whose output both branches share.
// Layers after the boundary exist twice, once per branch.
struct BackboneConfig {
  int in_channels = 1;
  std::vector<LayerSpec> layers;
  std::optional<std::string> sharing_boundary;

  void validate() const;
  std::size_t index_of(const std::string& layer) const;
  // Number of leading layers that are shared (0 when there is no boundary).
  std::size_t shared_count() const;
  int total_stride() const;
  int output_channels() const;
  std::vector<std::string> conv_names() const;
};

// Channel widths of conv1_1 .. conv4_3, reduced from VGG-16's 64..512.
inline constexpr std::array<int, 10> kDefaultVggWidths{8, 8, 16, 16, 32, 32, 32, 64, 64, 64};

// VGG-16 stages conv1_1 .. conv4_3 with pool1..pool3 between stages.
BackboneConfig vgg16_prefix(std::span<const int> widths = kDefaultVggWidths, int in_channels = 1);

// The boundary settings compared in the sharing ablation, shallowest first.
std::vector<std::optional<std::string>> ablation_boundaries();
std::string boundary_label(const std::optional<std::string>& boundary);
std::optional<std::string> parse_boundary(const std::string& text);

struct ConvParams {
  Var weight;
  Var bias;
};

using LayerParams = std::map<std::string, ConvParams>;

struct BackboneParams {
  LayerParams shared;
  LayerParams detector;
  LayerParams recognizer;
};

// He-normal weights, zero biases. Branch copies are drawn independently.
BackboneParams init_backbone(const BackboneConfig& cfg, std::mt19937_64& rng);

void collect_parameters(const BackboneParams& params, std::vector<NamedParam>& out);
// Parameters of the shared prefix only.
void collect_shared_parameters(const BackboneParams& params, std::vector<NamedParam>& out);

struct BackboneFeatures {
  Var shared;  // the input image when nothing is shared
  Var detector;
  Var recognizer;
};

// Incremented each time the corresponding stage is executed.
struct ForwardCounters {
  std::size_t shared_prefix_runs = 0;
  std::size_t detector_branch_runs = 0;
  std::size_t recognizer_branch_runs = 0;
};

enum class Branch { Detector, Recognizer };

// Runs layers [begin, end) of the config using `params` for conv weights.
Var run_layers(Graph& g, Var x, const BackboneConfig& cfg, std::size_t begin, std::size_t end,
               const LayerParams& params);

Var forward_prefix(Graph& g, const Var& image, const BackboneConfig& cfg,
                   const BackboneParams& params, ForwardCounters* counters = nullptr);
Var forward_branch(Graph& g, const Var& shared, const BackboneConfig& cfg,
                   const BackboneParams& params, Branch branch,
                   ForwardCounters* counters = nullptr);

// Computes the shared prefix once, then both branch suffixes from it.
BackboneFeatures forward_shared(Graph& g, const Var& image, const BackboneConfig& cfg,
                                const BackboneParams& params,
                                ForwardCounters* counters = nullptr);

struct ReceptiveField {
  int size = 1;
  int jump = 1;
};

ReceptiveField receptive_field(const BackboneConfig& cfg, const std::string& layer);

// FLOPs of the layers after `from` (or from the input when nullopt) through
// `to`, for an input of height x width. Conv: 2*k^2*Cin*Cout*Ho*Wo, plus
// Cout*Ho*Wo for its relu; pool: C*Ho*Wo.
std::uint64_t flop_count(const BackboneConfig& cfg, const std::optional<std::string>& from,
                         const std::string& to, int height, int width);

// Percentage of the standalone recognizer trunk covered by the shared prefix.
double sharing_saving_percent(const BackboneConfig& cfg,
                              const std::optional<std::string>& boundary, int height, int width);

}  // namespace sharedtext
