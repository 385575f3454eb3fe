#include "commands.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

#include "sharedtext/errors.hpp"
#include "sharedtext/joint_model.hpp"
#include "sharedtext/synth_data.hpp"

namespace sharedtext::cli {
namespace fs = std::filesystem;
namespace {

std::string csv_row(const std::vector<std::string>& fields) {
  std::string row;
  for (std::size_t i = 0; i < fields.size(); ++i) row += (i ? "," : "") + fields[i];
  return row + "\n";
}

std::string opt_float(const std::optional<double>& v) { return v ? format_float(*v) : ""; }

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void apply_overrides(RunConfig& cfg, const std::vector<std::string>& overrides) {
  for (const std::string& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::Train;
  if (name == "val") return Split::Val;
  if (name == "test") return Split::Test;
  throw ConfigError("split must be train, val or test, got '" + name + "'");
}

// Model and config stored in a checkpoint.
struct Loaded {
  RunConfig cfg;
  Model model;
  Checkpoint ckpt;
};

Loaded load_model(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("checkpoint not found: " + path.string());
  Loaded l;
  l.ckpt = load_checkpoint(path);
  l.cfg = parse_config(l.ckpt.config_text);
  l.model = init_model(l.cfg.model, l.cfg.seed);
  restore_parameters(l.model, l.ckpt);
  return l;
}

std::vector<std::string> eval_row(const EvaluationResult& r) {
  return {std::to_string(r.images),
          format_float(r.detection.recall()),
          format_float(r.detection.precision()),
          opt_float(r.ap),
          format_float(r.recognition.seq),
          format_float(r.recognition.chr),
          format_float(r.end_to_end.recall),
          format_float(r.end_to_end.accuracy),
          format_float(r.end_to_end.f_measure),
          opt_float(r.wer)};
}

std::string metrics_line(const EpochMetrics& m) {
  return csv_row({std::to_string(m.epoch), m.phase, format_float(m.total), format_float(m.det),
                  format_float(m.ctc), std::to_string(m.skipped_lines), opt_float(m.val_f_measure)});
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string saving_svg(const SavingReport& rep) {
  const double w = 480, h = 300, left = 60, right = 20, top = 30, bottom = 60;
  const double pw = w - left - right, ph = h - top - bottom;
  const std::size_t n = rep.rows.size();
  auto px = [&](std::size_t i) { return left + (n > 1 ? pw * i / (n - 1) : pw / 2); };
  auto py = [&](double pct) { return top + ph * (1.0 - pct / 100.0); };
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  s << "<text x=\"" << w / 2 << "\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">"
    << "Recognition FLOP saving by sharing boundary</text>\n";
  s << "<line x1=\"" << left << "\" y1=\"" << top + ph << "\" x2=\"" << left + pw << "\" y2=\"" << top + ph
    << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + ph
    << "\" stroke=\"black\"/>\n";
  for (int pct = 0; pct <= 100; pct += 25) {
    s << "<text x=\"" << left - 6 << "\" y=\"" << py(pct) + 4 << "\" text-anchor=\"end\" font-size=\"10\">"
      << pct << "%</text>\n";
  }
  s << "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"";
  for (std::size_t i = 0; i < n; ++i) s << (i ? " " : "") << px(i) << "," << py(rep.rows[i].saving_percent);
  s << "\"/>\n";
  for (std::size_t i = 0; i < n; ++i) {
    const SavingRow& r = rep.rows[i];
    s << "<circle cx=\"" << px(i) << "\" cy=\"" << py(r.saving_percent) << "\" r=\"3\" fill=\"steelblue\"/>\n";
    s << "<text x=\"" << px(i) << "\" y=\"" << top + ph + 16 << "\" text-anchor=\"middle\" font-size=\"10\">"
      << xml_escape(boundary_label(r.boundary)) << "</text>\n";
    s << "<text x=\"" << px(i) << "\" y=\"" << py(r.saving_percent) - 8
      << "\" text-anchor=\"middle\" font-size=\"9\">" << format_float(r.saving_percent) << "</text>\n";
  }
  s << "<text x=\"" << left + pw / 2 << "\" y=\"" << h - 12 << "\" text-anchor=\"middle\" font-size=\"11\">"
    << "sharing boundary</text>\n";
  s << "</svg>\n";
  return s.str();
}

std::string overlay_svg(const GrayImage& img, const std::vector<TextDetection>& dets) {
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << img.width << "\" height=\"" << img.height
    << "\">\n";
  s << "<rect x=\"0\" y=\"0\" width=\"" << img.width << "\" height=\"" << img.height
    << "\" fill=\"white\" stroke=\"gray\"/>\n";
  for (const TextDetection& d : dets) {
    s << "<rect x=\"" << format_float(d.box.x) << "\" y=\"" << format_float(d.box.y) << "\" width=\""
      << format_float(d.box.w) << "\" height=\"" << format_float(d.box.h)
      << "\" fill=\"none\" stroke=\"red\"/>\n";
    s << "<text x=\"" << format_float(d.box.x) << "\" y=\"" << format_float(std::max(8.0, d.box.y - 2))
      << "\" font-size=\"8\" fill=\"red\">" << xml_escape(d.text) << " " << format_float(d.score)
      << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

template <typename F>
int guarded(std::ostream& err, const char* command, F body) {
  try {
    return body();
  } catch (const std::exception& e) {
    err << "sharedtext " << command << ": " << e.what() << "\n";
    return 1;
  }
}

fs::path data_dir(const std::optional<fs::path>& opt, const RunConfig& cfg) {
  return opt ? *opt : fs::path(cfg.data_dir);
}

// Trains with a fresh state and evaluates on the test split.
EvaluationResult train_and_eval(const RunConfig& cfg, std::span<const Sample> train_set,
                                std::span<const Sample> test_set) {
  Model model = init_model(cfg.model, cfg.seed);
  TrainState state = initial_train_state(cfg.train);
  sharedtext::train(model, state, train_set, {}, cfg.train);
  return evaluate(model, test_set);
}

}  // namespace

std::string format_float(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

void write_atomic(const fs::path& path, const std::string& content) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot create " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw IoError("cannot move " + tmp.string() + " to " + path.string());
  }
}

const std::vector<std::string>& metrics_columns() {
  static const std::vector<std::string> c{"epoch", "phase", "total", "det", "ctc", "skipped_lines",
                                          "val_f_measure"};
  return c;
}

const std::vector<std::string>& eval_columns() {
  static const std::vector<std::string> c{"images",         "det_recall",   "det_precision",
                                          "det_ap",         "seq_acc",      "char_acc",
                                          "e2e_recall",     "e2e_accuracy", "e2e_f_measure",
                                          "wer"};
  return c;
}

const std::vector<std::string>& saving_columns() {
  static const std::vector<std::string> c{"boundary", "shared_flops", "standalone_flops",
                                          "saving_percent", "median_seconds", "mad_seconds",
                                          "runs", "speedup"};
  return c;
}

const std::vector<std::string>& ablation_columns() {
  static const std::vector<std::string> c = [] {
    std::vector<std::string> cols{"boundary", "strategy"};
    const auto& e = eval_columns();
    cols.insert(cols.end(), e.begin(), e.end());
    return cols;
  }();
  return c;
}

RunConfig resolve_config(const CommonOptions& common) {
  RunConfig cfg = common.config ? load_config(*common.config) : RunConfig{};
  apply_overrides(cfg, common.overrides);
  if (common.seed) cfg.seed = *common.seed;
  cfg.sync();
  cfg.validate();
  return cfg;
}

int gen_data(const GenDataOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(err, "gen-data", [&] {
    RunConfig cfg = resolve_config(opts.common);
    const int n = opts.n.value_or(cfg.data_count);
    const Manifest m = generate_dataset(cfg.page, n, cfg.split, opts.common.out);
    write_atomic(opts.common.out / "config.txt", format_config(cfg));
    const auto counts = split_counts(n, cfg.split);
    out << "wrote " << m.entries.size() << " pages (train " << counts[0] << ", val " << counts[1]
        << ", test " << counts[2] << ") to " << opts.common.out.string() << "\n";
    return 0;
  });
}

int train(const TrainOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(err, "train", [&] {
    RunConfig cfg;
    std::optional<Checkpoint> resumed;
    if (opts.resume) {
      if (!fs::exists(*opts.resume)) throw IoError("checkpoint not found: " + opts.resume->string());
      resumed = load_checkpoint(*opts.resume);
      cfg = parse_config(resumed->config_text);
      apply_overrides(cfg, opts.common.overrides);
      cfg.sync();
      cfg.validate();
    } else {
      cfg = resolve_config(opts.common);
    }
    if (opts.strategy) cfg.train.strategy = parse_strategy(*opts.strategy);

    const fs::path dir = data_dir(opts.data, cfg);
    const std::vector<Sample> train_set = load_split(dir, Split::Train);
    const std::vector<Sample> val_set = load_split(dir, Split::Val);
    if (train_set.empty()) throw ConfigError("no training pages in " + dir.string());

    const fs::path& run = opts.common.out;
    fs::create_directories(run);
    const std::string config_text = format_config(cfg);
    write_atomic(run / "config.txt", config_text);

    Model model = init_model(cfg.model, cfg.seed);
    TrainState state = initial_train_state(cfg.train);
    std::string metrics = csv_row(metrics_columns());
    if (resumed) {
      restore_parameters(model, *resumed);
      state = restore_train_state(*resumed);
      // Keep the rows logged before the checkpoint was taken.
      const fs::path old = run / "metrics.csv";
      if (fs::exists(old)) {
        std::istringstream in(read_text(old));
        std::string line;
        std::getline(in, line);
        while (std::getline(in, line)) {
          if (!line.empty() && std::stoi(line.substr(0, line.find(','))) <= state.epoch) metrics += line + "\n";
        }
      }
    }
    write_atomic(run / "metrics.csv", metrics);

    TrainHooks hooks;
    hooks.on_epoch = [&](const Model& m, const TrainState& s, const EpochMetrics& em) {
      metrics += metrics_line(em);
      write_atomic(run / "metrics.csv", metrics);
      save_checkpoint(run / "model.ckpt", make_checkpoint(m, config_text, s));
      out << "epoch " << em.epoch << " [" << em.phase << "] total " << format_float(em.total) << " det "
          << format_float(em.det) << " ctc " << format_float(em.ctc) << " val_f "
          << opt_float(em.val_f_measure) << "\n"
          << std::flush;
    };
    sharedtext::train(model, state, train_set, val_set, cfg.train, hooks);
    if (!fs::exists(run / "model.ckpt")) {
      save_checkpoint(run / "model.ckpt", make_checkpoint(model, config_text, state));
    }
    return 0;
  });
}

int eval(const EvalOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(err, "eval", [&] {
    const Loaded l = load_model(opts.checkpoint);
    const fs::path dir = data_dir(opts.data, l.cfg);
    const std::vector<Sample> samples = load_split(dir, parse_split(opts.split));
    if (samples.empty()) throw ConfigError("no " + opts.split + " pages in " + dir.string());
    const EvaluationResult r = evaluate(l.model, samples);
    fs::create_directories(opts.common.out);
    const std::string csv = csv_row(eval_columns()) + csv_row(eval_row(r));
    write_atomic(opts.common.out / "eval.csv", csv);
    out << csv;
    return 0;
  });
}

int infer(const InferOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(err, "infer", [&] {
    const Loaded l = load_model(opts.checkpoint);
    const GrayImage img = read_pgm(opts.image);
    std::vector<std::string> warnings;
    const std::vector<TextDetection> dets = end_to_end_infer(img, l.model, nullptr, &warnings);
    for (const std::string& w : warnings) err << "warning: " << w << "\n";
    std::string dump;
    for (const TextDetection& d : dets) {
      dump += format_float(d.box.x) + " " + format_float(d.box.y) + " " + format_float(d.box.w) + " " +
              format_float(d.box.h) + " " + format_float(d.score) + " " + d.text + "\n";
    }
    fs::create_directories(opts.common.out);
    write_atomic(opts.common.out / "detections.txt", dump);
    if (opts.svg) write_atomic(opts.common.out / "overlay.svg", overlay_svg(img, dets));
    out << dump;
    return 0;
  });
}

int bench(const BenchOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(err, "bench", [&] {
    const RunConfig cfg = resolve_config(opts.common);
    const int runs = opts.runs.value_or(cfg.bench_runs);
    if (runs < 1) throw ConfigError("bench: runs must be >= 1");

    // Lines of one generated page stand in for the detector's output.
    auto rng = page_rng(cfg.seed, static_cast<int>(Split::Test), 0);
    const Sample page = render_page(cfg.page, rng);
    RecognitionStageSetup setup;
    setup.pool = cfg.model.pool;
    setup.recognizer = cfg.model.recognizer;
    setup.num_classes = static_cast<int>(cfg.model.alphabet.size()) + 1;
    for (const Annotation& a : page.annotations) setup.regions.push_back(a.box);

    const SavingReport rep = saving_report(cfg.model.backbone, cfg.bench_boundaries, cfg.page.height,
                                           cfg.page.width, runs, setup, cfg.seed);
    std::string csv = csv_row(saving_columns());
    for (const SavingRow& r : rep.rows) {
      csv += csv_row({boundary_label(r.boundary), std::to_string(r.shared_flops),
                      std::to_string(r.standalone_flops), format_float(r.saving_percent),
                      format_float(r.recognition_time.median), format_float(r.recognition_time.mad),
                      std::to_string(r.recognition_time.runs), format_float(r.speedup)});
    }
    fs::create_directories(opts.common.out);
    write_atomic(opts.common.out / "saving.csv", csv);
    write_atomic(opts.common.out / "saving.svg", saving_svg(rep));
    out << csv;

    if (opts.ablation) {
      const fs::path dir = data_dir(opts.data, cfg);
      const std::vector<Sample> train_set = load_split(dir, Split::Train);
      const std::vector<Sample> test_set = load_split(dir, Split::Test);
      if (train_set.empty() || test_set.empty()) {
        throw ConfigError("ablation needs train and test pages in " + dir.string());
      }
      std::string table = csv_row(ablation_columns());
      for (const auto& boundary : cfg.bench_boundaries) {
        for (Strategy strategy : {Strategy::Joint, Strategy::Separate}) {
          RunConfig c = cfg;
          c.model.backbone.sharing_boundary = boundary;
          c.train.strategy = strategy;
          const EvaluationResult r = train_and_eval(c, train_set, test_set);
          std::vector<std::string> row{boundary_label(boundary), strategy_name(strategy)};
          const auto e = eval_row(r);
          row.insert(row.end(), e.begin(), e.end());
          table += csv_row(row);
          out << "ablation " << row[0] << " " << row[1] << " done\n" << std::flush;
        }
      }
      write_atomic(opts.common.out / "ablation.csv", table);
      out << table;
    }
    return 0;
  });
}

}  // namespace sharedtext::cli
