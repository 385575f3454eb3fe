#include "sharedtext/config.hpp"

#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "sharedtext/errors.hpp"

namespace sharedtext {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

long long to_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long x = std::stoll(v, &used);
    if (used == v.size()) return x;
  } catch (const std::exception&) {
  }
  throw ConfigError(key + ": expected an integer, got '" + v + "'");
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used == v.size()) return x;
  } catch (const std::exception&) {
  }
  throw ConfigError(key + ": expected a number, got '" + v + "'");
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  for (std::string item; std::getline(ss, item, ',');) out.push_back(trim(item));
  return out;
}

template <typename T, typename F>
std::string join(const std::vector<T>& items, F f) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? "," : "") + f(items[i]);
  return out;
}

struct Entry {
  ConfigKey key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};


template <typename Get>
Entry make_int(const std::string& name, const std::string& help, Get ref) {
  return {{name, help},
          [name, ref](RunConfig& c, const std::string& v) { ref(c) = static_cast<int>(to_int(name, v)); },
          [ref](const RunConfig& c) { return std::to_string(ref(const_cast<RunConfig&>(c))); }};
}

template <typename Get>
Entry make_double(const std::string& name, const std::string& help, Get ref) {
  return {{name, help},
          [name, ref](RunConfig& c, const std::string& v) { ref(c) = to_double(name, v); },
          [ref](const RunConfig& c) { return fmt(ref(const_cast<RunConfig&>(c))); }};
}

template <typename Get>
Entry make_doubles(const std::string& name, const std::string& help, Get ref) {
  return {{name, help},
          [name, ref](RunConfig& c, const std::string& v) {
            std::vector<double> xs;
            for (const std::string& s : split_list(v)) xs.push_back(to_double(name, s));
            ref(c) = xs;
          },
          [ref](const RunConfig& c) { return join(ref(const_cast<RunConfig&>(c)), fmt); }};
}

#define FIELD(expr) [](RunConfig& c) -> auto& { return expr; }

const std::vector<Entry>& entries() {
  static const std::vector<Entry> table = [] {
    std::vector<Entry> t;
    t.push_back({{"seed", "seed for data generation, initialisation and training"},
                 [](RunConfig& c, const std::string& v) {
                   c.seed = static_cast<std::uint64_t>(to_int("seed", v));
                 },
                 [](const RunConfig& c) { return std::to_string(c.seed); }});
    t.push_back(make_int("page.width", "page width in pixels", FIELD(c.page.width)));
    t.push_back(make_int("page.height", "page height in pixels", FIELD(c.page.height)));
    t.push_back(make_int("page.lines_min", "fewest text lines per page", FIELD(c.page.lines_min)));
    t.push_back(make_int("page.lines_max", "most text lines per page", FIELD(c.page.lines_max)));
    t.push_back(make_int("page.text_min", "shortest line in glyphs", FIELD(c.page.text_min)));
    t.push_back(make_int("page.text_max", "longest line in glyphs", FIELD(c.page.text_max)));
    t.push_back(make_double("page.scale_min", "smallest glyph scale (12x8 cell)", FIELD(c.page.scale_min)));
    t.push_back(make_double("page.scale_max", "largest glyph scale", FIELD(c.page.scale_max)));
    t.push_back(make_double("page.gap_min", "smallest inter-glyph gap / glyph width", FIELD(c.page.gap_min)));
    t.push_back(make_double("page.gap_max", "largest inter-glyph gap / glyph width", FIELD(c.page.gap_max)));
    t.push_back(make_double("page.noise", "std dev of additive pixel noise", FIELD(c.page.noise)));
    t.push_back(make_int("page.margin", "blank border in pixels", FIELD(c.page.margin)));
    t.push_back(make_int("page.line_gap", "minimum vertical gap between lines", FIELD(c.page.line_gap)));
    t.push_back(make_int("page.alphabet_size", "symbols used, the first N of A..Z", FIELD(c.page.alphabet_size)));
    t.push_back(make_int("data.count", "pages generated by gen-data", FIELD(c.data_count)));
    t.push_back(make_double("data.train_fraction", "share of pages in the train split", FIELD(c.split.train)));
    t.push_back(make_double("data.val_fraction", "share of pages in the val split; test gets the rest", FIELD(c.split.val)));
    t.push_back({{"data.dir", "dataset directory read by train, eval and bench"},
                 [](RunConfig& c, const std::string& v) { c.data_dir = v; },
                 [](const RunConfig& c) { return c.data_dir; }});
    t.push_back({{"backbone.widths", "channels of conv1_1..conv4_3, comma separated"},
                 [](RunConfig& c, const std::string& v) {
                   std::vector<int> w;
                   for (const std::string& s : split_list(v)) w.push_back(static_cast<int>(to_int("backbone.widths", s)));
                   if (w.size() != kDefaultVggWidths.size()) {
                     throw ConfigError("backbone.widths: expected " + std::to_string(kDefaultVggWidths.size()) + " values");
                   }
                   c.widths = w;
                 },
                 [](const RunConfig& c) { return join(c.widths, [](int x) { return std::to_string(x); }); }});
    t.push_back({{"backbone.sharing_boundary", "last shared layer, or none"},
                 [](RunConfig& c, const std::string& v) { c.model.backbone.sharing_boundary = parse_boundary(v); },
                 [](const RunConfig& c) { return boundary_label(c.model.backbone.sharing_boundary); }});
    t.push_back(make_doubles("detector.scales", "anchor scales in feature cells", FIELD(c.model.detector.scales)));
    t.push_back(make_doubles("detector.ratios", "anchor height:width ratios", FIELD(c.model.detector.ratios)));
    t.push_back(make_int("detector.head_channels", "width of the detector's hidden conv", FIELD(c.model.detector.head_channels)));
    t.push_back(make_int("detector.ps_k", "position-sensitive grid size k", FIELD(c.model.detector.ps_k)));
    t.push_back(make_int("detector.rpn_batch", "anchors sampled per image", FIELD(c.model.detector.rpn_batch)));
    t.push_back(make_double("detector.rpn_pos_fraction", "positive share of the anchor sample", FIELD(c.model.detector.rpn_pos_fraction)));
    t.push_back(make_double("detector.rpn_pos_iou", "anchor positive IoU", FIELD(c.model.detector.rpn_pos_iou)));
    t.push_back(make_double("detector.rpn_neg_iou", "anchor negative IoU", FIELD(c.model.detector.rpn_neg_iou)));
    t.push_back(make_int("detector.pre_nms_top", "proposals kept before NMS", FIELD(c.model.detector.pre_nms_top)));
    t.push_back(make_double("detector.proposal_nms", "proposal NMS IoU", FIELD(c.model.detector.proposal_nms)));
    t.push_back(make_int("detector.post_nms_top", "proposals kept after NMS", FIELD(c.model.detector.post_nms_top)));
    t.push_back(make_int("detector.roi_batch", "regions sampled for the scoring stage", FIELD(c.model.detector.roi_batch)));
    t.push_back(make_double("detector.roi_pos_fraction", "positive share of the region sample", FIELD(c.model.detector.roi_pos_fraction)));
    t.push_back(make_double("detector.roi_pos_iou", "region positive IoU", FIELD(c.model.detector.roi_pos_iou)));
    t.push_back(make_double("detector.roi_neg_iou", "region negative IoU", FIELD(c.model.detector.roi_neg_iou)));
    t.push_back(make_double("detector.nms_iou", "final NMS IoU", FIELD(c.model.detector.nms_iou)));
    t.push_back(make_double("detector.score_threshold", "minimum text probability of a detection", FIELD(c.model.detector.score_threshold)));
    t.push_back(make_int("pool.height", "pooled height H", FIELD(c.model.pool.height)));
    t.push_back(make_int("recognizer.channels", "recognizer conv width", FIELD(c.model.recognizer.channels)));
    t.push_back(make_int("recognizer.blocks", "conv + 2x1 pool blocks", FIELD(c.model.recognizer.blocks)));
    t.push_back(make_int("recognizer.context_layers", "1xK context convs", FIELD(c.model.recognizer.context_layers)));
    t.push_back(make_int("recognizer.context_kernel", "context conv width K", FIELD(c.model.recognizer.context_kernel)));
    t.push_back(make_double("train.lambda", "weight of the recognition loss", FIELD(c.train.lambda)));
    t.push_back(make_double("train.gamma", "weight of the box regression loss", FIELD(c.train.gamma)));
    t.push_back(make_double("train.lr", "Adam step size", FIELD(c.train.adam.lr)));
    t.push_back(make_double("train.beta1", "Adam first moment decay", FIELD(c.train.adam.beta1)));
    t.push_back(make_double("train.beta2", "Adam second moment decay", FIELD(c.train.adam.beta2)));
    t.push_back(make_double("train.eps", "Adam epsilon", FIELD(c.train.adam.eps)));
    t.push_back(make_int("train.epochs", "passes over the train split", FIELD(c.train.epochs)));
    t.push_back(make_int("train.batch", "images per update", FIELD(c.train.batch)));
    t.push_back({{"train.strategy", "joint or separate"},
                 [](RunConfig& c, const std::string& v) { c.train.strategy = parse_strategy(v); },
                 [](const RunConfig& c) { return strategy_name(c.train.strategy); }});
    t.push_back(make_int("train.warmup_epochs", "detection-only epochs of the separate strategy", FIELD(c.train.warmup_epochs)));
    t.push_back({{"train.recognition_source", "ground_truth or detections"},
                 [](RunConfig& c, const std::string& v) { c.train.recognition_source = parse_recognition_source(v); },
                 [](const RunConfig& c) { return recognition_source_name(c.train.recognition_source); }});
    t.push_back(make_double("train.box_jitter", "recognition box jitter / box height", FIELD(c.train.box_jitter)));
    t.push_back(make_int("train.lr_drop_epoch", "first epoch run at the reduced step size; 0 never", FIELD(c.train.lr_drop_epoch)));
    t.push_back(make_double("train.lr_drop_factor", "step size multiplier from lr_drop_epoch on", FIELD(c.train.lr_drop_factor)));
    t.push_back(make_int("bench.runs", "timing repetitions per boundary", FIELD(c.bench_runs)));
    t.push_back({{"bench.boundaries", "boundaries compared by bench, comma separated"},
                 [](RunConfig& c, const std::string& v) {
                   c.bench_boundaries.clear();
                   for (const std::string& s : split_list(v)) c.bench_boundaries.push_back(parse_boundary(s));
                 },
                 [](const RunConfig& c) { return join(c.bench_boundaries, boundary_label); }});
    return t;
  }();
  return table;
}

#undef FIELD

const Entry& find_entry(const std::string& key) {
  for (const Entry& e : entries()) {
    if (e.key.name == key) return e;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

void RunConfig::sync() {
  page.seed = seed;
  train.seed = seed;
  const auto boundary = model.backbone.sharing_boundary;
  model.backbone = vgg16_prefix(widths, model.backbone.in_channels);
  model.backbone.sharing_boundary = boundary;
  model.alphabet = GlyphSet::builtin(page.alphabet_size).symbols();
}

void RunConfig::validate() const {
  page.validate();
  split.validate();
  if (data_count < 1) throw ConfigError("data.count must be >= 1");
  model.validate();
  train.validate();
  if (bench_runs < 1) throw ConfigError("bench.runs must be >= 1");
  for (const auto& b : bench_boundaries) {
    if (b) (void)model.backbone.index_of(*b);
  }
}

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    for (const Entry& e : entries()) k.push_back(e.key);
    return k;
  }();
  return keys;
}

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  find_entry(key).set(cfg, value);
}

std::string get_config_value(const RunConfig& cfg, const std::string& key) {
  return find_entry(key).get(cfg);
}

RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key = trim(t.substr(0, eq));
    try {
      set_config_value(cfg, key, trim(t.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(line_no) + ": " + e.what());
    } catch (const Error& e) {
      throw ConfigError("config line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  cfg.sync();
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string format_config(const RunConfig& cfg) {
  std::string out;
  for (const Entry& e : entries()) {
    out += "# " + e.key.help + "\n" + e.key.name + " = " + e.get(cfg) + "\n";
  }
  return out;
}

}  // namespace sharedtext
