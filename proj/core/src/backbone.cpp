#include "sharedtext/backbone.hpp"

#include <cmath>
#include <set>

#include "sharedtext/errors.hpp"
#include "sharedtext/ops.hpp"

namespace sharedtext {

void BackboneConfig::validate() const {
  if (in_channels < 1) throw ConfigError("backbone: in_channels must be >= 1");
  if (layers.empty()) throw ConfigError("backbone: no layers");
  std::set<std::string> seen;
  bool has_conv = false;
  for (const LayerSpec& l : layers) {
    if (l.name.empty()) throw ConfigError("backbone: unnamed layer");
    if (!seen.insert(l.name).second) throw ConfigError("backbone: duplicate layer " + l.name);
    if (l.kernel < 1 || l.stride < 1 || l.pad < 0) {
      throw ConfigError("backbone: bad geometry for layer " + l.name);
    }
    if (l.kind == LayerKind::Conv) {
      if (l.out_channels < 1) throw ConfigError("backbone: conv " + l.name + " needs channels");
      has_conv = true;
    }
  }
  if (!has_conv) throw ConfigError("backbone: no conv layers");
  if (sharing_boundary && !seen.contains(*sharing_boundary)) {
    throw LookupError("backbone: sharing boundary names unknown layer " + *sharing_boundary);
  }
}

std::size_t BackboneConfig::index_of(const std::string& layer) const {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].name == layer) return i;
  }
  throw LookupError("backbone: unknown layer " + layer);
}

std::size_t BackboneConfig::shared_count() const {
  return sharing_boundary ? index_of(*sharing_boundary) + 1 : 0;
}

int BackboneConfig::total_stride() const {
  int s = 1;
  for (const LayerSpec& l : layers) s *= l.stride;
  return s;
}

int BackboneConfig::output_channels() const {
  int c = in_channels;
  for (const LayerSpec& l : layers) {
    if (l.kind == LayerKind::Conv) c = l.out_channels;
  }
  return c;
}

std::vector<std::string> BackboneConfig::conv_names() const {
  std::vector<std::string> out;
  for (const LayerSpec& l : layers) {
    if (l.kind == LayerKind::Conv) out.push_back(l.name);
  }
  return out;
}

BackboneConfig vgg16_prefix(std::span<const int> widths, int in_channels) {
  if (widths.size() != 10) throw ConfigError("vgg16_prefix: need 10 channel widths");
  static constexpr std::array<int, 4> kStageDepth{2, 2, 3, 3};
  BackboneConfig cfg;
  cfg.in_channels = in_channels;
  std::size_t w = 0;
  for (int stage = 0; stage < 4; ++stage) {
    for (int j = 0; j < kStageDepth[stage]; ++j) {
      cfg.layers.push_back({"conv" + std::to_string(stage + 1) + "_" + std::to_string(j + 1),
                            LayerKind::Conv, 3, 1, 1, widths[w++], true});
    }
    if (stage < 3) {
      cfg.layers.push_back({"pool" + std::to_string(stage + 1), LayerKind::Pool, 2, 2, 0, 0, false});
    }
  }
  return cfg;
}

std::vector<std::optional<std::string>> ablation_boundaries() {
  return {std::nullopt, "conv1_2", "conv2_2", "conv3_3", "conv4_3"};
}

std::string boundary_label(const std::optional<std::string>& boundary) {
  return boundary ? *boundary : "none";
}

std::optional<std::string> parse_boundary(const std::string& text) {
  if (text.empty() || text == "none" || text == "None") return std::nullopt;
  return text;
}

namespace {

ConvParams init_conv(int cin, const LayerSpec& l, std::mt19937_64& rng) {
  const double std_dev = std::sqrt(2.0 / (static_cast<double>(cin) * l.kernel * l.kernel));
  std::normal_distribution<double> normal(0.0, std_dev);
  Tensor w({l.out_channels, cin, l.kernel, l.kernel});
  for (double& v : w.values()) v = normal(rng);
  return {parameter(std::move(w)), parameter(Tensor({l.out_channels}, 0.0))};
}

void collect(const LayerParams& layers, const std::string& prefix, std::vector<NamedParam>& out) {
  for (const auto& [name, p] : layers) {
    out.push_back({prefix + name + ".weight", p.weight});
    out.push_back({prefix + name + ".bias", p.bias});
  }
}

}  // namespace

BackboneParams init_backbone(const BackboneConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  BackboneParams params;
  const std::size_t shared = cfg.shared_count();
  int cin = cfg.in_channels;
  for (std::size_t i = 0; i < cfg.layers.size(); ++i) {
    const LayerSpec& l = cfg.layers[i];
    if (l.kind != LayerKind::Conv) continue;
    if (i < shared) {
      params.shared.emplace(l.name, init_conv(cin, l, rng));
    } else {
      params.detector.emplace(l.name, init_conv(cin, l, rng));
      params.recognizer.emplace(l.name, init_conv(cin, l, rng));
    }
    cin = l.out_channels;
  }
  return params;
}

void collect_parameters(const BackboneParams& params, std::vector<NamedParam>& out) {
  collect(params.shared, "backbone.shared.", out);
  collect(params.detector, "backbone.detector.", out);
  collect(params.recognizer, "backbone.recognizer.", out);
}

void collect_shared_parameters(const BackboneParams& params, std::vector<NamedParam>& out) {
  collect(params.shared, "backbone.shared.", out);
}

Var run_layers(Graph& g, Var x, const BackboneConfig& cfg, std::size_t begin, std::size_t end,
               const LayerParams& params) {
  for (std::size_t i = begin; i < end; ++i) {
    const LayerSpec& l = cfg.layers[i];
    if (l.kind == LayerKind::Conv) {
      auto it = params.find(l.name);
      if (it == params.end()) throw LookupError("backbone: missing parameters for " + l.name);
      x = conv2d(g, x, it->second.weight, it->second.bias, l.stride, l.pad);
      if (l.relu) x = relu(g, x);
    } else {
      x = maxpool2d(g, x, l.kernel, l.stride).output;
    }
  }
  return x;
}

Var forward_prefix(Graph& g, const Var& image, const BackboneConfig& cfg,
                   const BackboneParams& params, ForwardCounters* counters) {
  const Tensor& img = image->value;
  if (img.rank() != 4 || img.dim(1) != cfg.in_channels) {
    throw DimensionError("backbone: expected image [N," + std::to_string(cfg.in_channels) +
                         ",H,W], got " + shape_string(img.shape()));
  }
  const int stride = cfg.total_stride();
  if (img.dim(2) % stride != 0 || img.dim(3) % stride != 0) {
    throw DimensionError("backbone: image " + shape_string(img.shape()) +
                         " not divisible by total stride " + std::to_string(stride));
  }
  const std::size_t shared = cfg.shared_count();
  if (shared == 0) return image;
  if (counters) ++counters->shared_prefix_runs;
  return run_layers(g, image, cfg, 0, shared, params.shared);
}

Var forward_branch(Graph& g, const Var& shared, const BackboneConfig& cfg,
                   const BackboneParams& params, Branch branch, ForwardCounters* counters) {
  if (counters) {
    ++(branch == Branch::Detector ? counters->detector_branch_runs
                                  : counters->recognizer_branch_runs);
  }
  const LayerParams& own = branch == Branch::Detector ? params.detector : params.recognizer;
  return run_layers(g, shared, cfg, cfg.shared_count(), cfg.layers.size(), own);
}

BackboneFeatures forward_shared(Graph& g, const Var& image, const BackboneConfig& cfg,
                                const BackboneParams& params, ForwardCounters* counters) {
  BackboneFeatures f;
  f.shared = forward_prefix(g, image, cfg, params, counters);
  f.detector = forward_branch(g, f.shared, cfg, params, Branch::Detector, counters);
  f.recognizer = forward_branch(g, f.shared, cfg, params, Branch::Recognizer, counters);
  return f;
}

ReceptiveField receptive_field(const BackboneConfig& cfg, const std::string& layer) {
  const std::size_t last = cfg.index_of(layer);
  ReceptiveField rf;
  for (std::size_t i = 0; i <= last; ++i) {
    rf.size += (cfg.layers[i].kernel - 1) * rf.jump;
    rf.jump *= cfg.layers[i].stride;
  }
  return rf;
}

std::uint64_t flop_count(const BackboneConfig& cfg, const std::optional<std::string>& from,
                         const std::string& to, int height, int width) {
  const std::size_t end = cfg.index_of(to) + 1;
  const std::size_t begin = from ? cfg.index_of(*from) + 1 : 0;
  if (begin > end) throw LookupError("flop_count: " + *from + " does not precede " + to);
  std::uint64_t flops = 0;
  int h = height, w = width, c = cfg.in_channels;
  for (std::size_t i = 0; i < end; ++i) {
    const LayerSpec& l = cfg.layers[i];
    const int ho = (h + 2 * l.pad - l.kernel) / l.stride + 1;
    const int wo = (w + 2 * l.pad - l.kernel) / l.stride + 1;
    const int cout = l.kind == LayerKind::Conv ? l.out_channels : c;
    if (i >= begin) {
      const std::uint64_t sites = static_cast<std::uint64_t>(cout) * ho * wo;
      if (l.kind == LayerKind::Conv) {
        flops += 2ull * l.kernel * l.kernel * static_cast<std::uint64_t>(c) * sites;
        if (l.relu) flops += sites;
      } else {
        flops += sites;
      }
    }
    h = ho;
    w = wo;
    c = cout;
  }
  return flops;
}

double sharing_saving_percent(const BackboneConfig& cfg,
                              const std::optional<std::string>& boundary, int height, int width) {
  if (!boundary) return 0.0;
  const std::string& last = cfg.layers.back().name;
  const double total = static_cast<double>(flop_count(cfg, std::nullopt, last, height, width));
  const double shared = static_cast<double>(flop_count(cfg, std::nullopt, *boundary, height, width));
  return 100.0 * shared / total;
}

}  // namespace sharedtext
