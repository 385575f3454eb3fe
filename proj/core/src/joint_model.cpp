#include "sharedtext/joint_model.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <exception>
#include <fstream>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include "sharedtext/errors.hpp"
#include "sharedtext/ops.hpp"

namespace sharedtext {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[4] = {'S', 'T', 'X', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;
constexpr std::uint8_t kDtypeF64 = 1;

// Each edge moves outward by up to amount * h and inward by at most a quarter
// of that, so the recognizer sees loose boxes without losing glyphs.
Box jitter_box(const Box& b, double amount, double img_w, double img_h, std::mt19937_64& rng) {
  if (amount <= 0.0) return b;
  std::uniform_real_distribution<double> u(-0.25 * amount * b.h, amount * b.h);
  const double x0 = b.x - u(rng), y0 = b.y - u(rng);
  const double x1 = b.right() + u(rng), y1 = b.bottom() + u(rng);
  Box j{x0, y0, x1 - x0, y1 - y0};
  j = clip_box(j, img_w, img_h);
  if (j.w < 1.0 || j.h < 1.0) return b;
  return j;
}

Var detach(const Var& v) { return constant(v->value); }

// Per-line recognition on the recognizer branch. Returns null when the line
// cannot contribute (empty projection or too few frames).
Var line_ctc(Graph& g, const Var& features, const Box& box, const std::string& text,
             const Model& model) {
  PooledTextFeature pooled;
  try {
    pooled = text_pool(g, features, box, model.stride(), model.config.pool);
  } catch (const RegionError&) {
    return nullptr;
  }
  const std::vector<int> label = model.codec.encode(text);
  if (pooled.width() < required_frames(label)) return nullptr;
  const Var logits = fcr_forward(g, pooled.data, model.fcr, model.config.recognizer);
  return ctc_loss(g, log_softmax(g, logits), label);
}

void check_finite(double v, const std::string& what) {
  if (!std::isfinite(v)) throw NumericError("training diverged: non-finite " + what);
}

// Byte writer/reader for the checkpoint format.
class Writer {
 public:
  template <typename T>
  void pod(T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out_.append(buf, sizeof(T));
  }
  void str(const std::string& s) {
    pod<std::uint64_t>(s.size());
    out_ += s;
  }
  void tensor(const Tensor& t) {
    pod<std::uint8_t>(kDtypeF64);
    pod<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) pod<std::int64_t>(d);
    out_.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(double));
  }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T pod() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint64_t>();
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  Tensor tensor() {
    if (pod<std::uint8_t>() != kDtypeF64) throw FormatError("checkpoint: unknown dtype tag");
    const auto rank = pod<std::uint32_t>();
    if (rank > 8) throw CorruptionError("checkpoint: implausible tensor rank");
    Shape shape;
    std::uint64_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      const auto d = pod<std::int64_t>();
      if (d < 1 || d > (1 << 30)) throw CorruptionError("checkpoint: bad tensor extent");
      shape.push_back(static_cast<int>(d));
      count *= static_cast<std::uint64_t>(d);
    }
    need(count * sizeof(double));
    std::vector<double> data(count);
    std::memcpy(data.data(), bytes_.data() + pos_, count * sizeof(double));
    pos_ += count * sizeof(double);
    return Tensor(std::move(shape), std::move(data));
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::uint64_t n) const {
    if (n > bytes_.size() - pos_) throw CorruptionError("checkpoint: truncated file");
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

struct ImageOutcome {
  std::vector<TextDetection> all;       // every detection after NMS
  std::vector<TextDetection> accepted;  // above the score threshold
  std::vector<std::pair<std::string, std::string>> gt_recognition;
};

ImageOutcome run_image(const Model& model, const Sample& sample, bool recognize_gts,
                       InferenceCounters* counters, std::vector<std::string>* warnings) {
  const GrayImage& img = sample.image;
  Graph g(false);
  const BackboneFeatures f = forward_shared(g, constant(img.to_tensor()), model.config.backbone,
                                            model.backbone, counters ? &counters->forward : nullptr);
  const DetectorConfig& dc = model.config.detector;
  const std::vector<Detection> dets =
      detect(g, f.detector, model.detector, dc, model.stride(), img.width, img.height, 0.0);
  ImageOutcome out;
  for (const Detection& d : dets) {
    TextDetection td{d.box, {}, d.score};
    if (d.score >= dc.score_threshold) {
      if (counters) ++counters->detections;
      try {
        td.text = recognize_region(f.recognizer, d.box, model);
        if (counters) ++counters->recognized;
      } catch (const RegionError& e) {
        if (counters) ++counters->skipped_regions;
        if (warnings) warnings->push_back(e.what());
        continue;
      }
      out.accepted.push_back(td);
    }
    out.all.push_back(std::move(td));
  }
  if (recognize_gts) {
    for (const Annotation& a : sample.annotations) {
      std::string hyp;
      try {
        hyp = recognize_region(f.recognizer, a.box, model);
      } catch (const RegionError&) {
      }
      out.gt_recognition.emplace_back(a.text, hyp);
    }
  }
  return out;
}

std::string reading_order_text(std::vector<std::pair<Box, std::string>> lines) {
  std::stable_sort(lines.begin(), lines.end(), [](const auto& a, const auto& b) {
    return a.first.y != b.first.y ? a.first.y < b.first.y : a.first.x < b.first.x;
  });
  std::string text;
  for (const auto& [box, t] : lines) {
    if (t.empty()) continue;
    if (!text.empty()) text += ' ';
    text += t;
  }
  return text;
}

}  // namespace

BackboneConfig ModelConfig::default_backbone() {
  BackboneConfig b = vgg16_prefix();
  b.sharing_boundary = "conv2_2";
  return b;
}

void ModelConfig::validate() const {
  backbone.validate();
  detector.validate();
  pool.validate();
  recognizer.validate();
  (void)AlphabetCodec(alphabet);
}

Model init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  Model m;
  m.config = cfg;
  m.codec = AlphabetCodec(cfg.alphabet);
  m.backbone = init_backbone(cfg.backbone, rng);
  const int channels = cfg.backbone.output_channels();
  m.detector = init_detector(channels, cfg.detector, rng);
  m.fcr = init_fcr(channels, m.codec.num_classes(), cfg.recognizer, rng);
  return m;
}

std::vector<NamedParam> named_parameters(const Model& m) {
  std::vector<NamedParam> out;
  collect_parameters(m.backbone, out);
  collect_parameters(m.detector, out);
  collect_parameters(m.fcr, out);
  return out;
}

std::vector<NamedParam> detection_parameters(const Model& m) {
  std::vector<NamedParam> out;
  for (NamedParam& p : named_parameters(m)) {
    if (p.name.starts_with("backbone.recognizer.") || p.name.starts_with("fcr.")) continue;
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<NamedParam> recognition_parameters(const Model& m) {
  std::vector<NamedParam> out;
  for (NamedParam& p : named_parameters(m)) {
    if (p.name.starts_with("backbone.detector.") || p.name.starts_with("detector.")) continue;
    out.push_back(std::move(p));
  }
  return out;
}

std::string strategy_name(Strategy s) { return s == Strategy::Joint ? "joint" : "separate"; }

Strategy parse_strategy(const std::string& text) {
  if (text == "joint") return Strategy::Joint;
  if (text == "separate") return Strategy::Separate;
  throw ConfigError("strategy must be joint or separate, got '" + text + "'");
}

std::string recognition_source_name(RecognitionSource s) {
  return s == RecognitionSource::GroundTruth ? "ground_truth" : "detections";
}

RecognitionSource parse_recognition_source(const std::string& text) {
  if (text == "ground_truth") return RecognitionSource::GroundTruth;
  if (text == "detections") return RecognitionSource::Detections;
  throw ConfigError("recognition_source must be ground_truth or detections, got '" + text + "'");
}

void TrainConfig::validate() const {
  if (!(lambda > 0.0)) throw ConfigError("train: lambda must be > 0");
  if (!(gamma >= 0.0)) throw ConfigError("train: gamma must be >= 0");
  sharedtext::validate(adam);
  if (epochs < 0) throw ConfigError("train: epochs must be >= 0");
  if (batch < 1) throw ConfigError("train: batch must be >= 1");
  if (warmup_epochs < 0) throw ConfigError("train: warmup_epochs must be >= 0");
  if (!(box_jitter >= 0.0 && box_jitter <= 1.0)) throw ConfigError("train: box_jitter must be in [0, 1]");
  if (lr_drop_epoch < 0) throw ConfigError("train: lr_drop_epoch must be >= 0");
  if (!(lr_drop_factor > 0.0 && lr_drop_factor <= 1.0)) throw ConfigError("train: lr_drop_factor must be in (0, 1]");
}

LossBreakdown joint_loss(Graph& g, const Sample& sample, const Model& model,
                         const LossOptions& opts, std::mt19937_64& rng) {
  if (!(opts.lambda > 0.0)) throw ConfigError("joint_loss: lambda must be > 0");
  const GrayImage& img = sample.image;
  const ModelConfig& mc = model.config;
  Var shared = forward_prefix(g, constant(img.to_tensor()), mc.backbone, model.backbone);
  if (opts.freeze_shared) shared = detach(shared);

  std::vector<Box> gts;
  for (const Annotation& a : sample.annotations) gts.push_back(a.box);

  LossBreakdown lb;
  Var det_features;
  if (opts.detection || opts.recognition_source == RecognitionSource::Detections) {
    det_features = forward_branch(g, shared, mc.backbone, model.backbone, Branch::Detector);
  }
  if (opts.detection) {
    const DetectorOutputs out = detector_forward(g, det_features, model.detector, mc.detector);
    DetectorLoss dl = detector_loss(g, out, gts, mc.detector, model.stride(), img.width, img.height,
                                    opts.gamma, rng);
    lb.det_var = dl.total;
    lb.det_total = dl.total->value.item();
    lb.cls = dl.cls;
    lb.reg = dl.reg;
  }

  if (opts.recognition) {
    // Regions and their transcriptions that the recognizer trains on.
    std::vector<std::pair<Box, std::string>> lines;
    if (opts.recognition_source == RecognitionSource::GroundTruth) {
      for (const Annotation& a : sample.annotations) {
        lines.emplace_back(jitter_box(a.box, opts.box_jitter, img.width, img.height, rng), a.text);
      }
    } else {
      Graph probe(false);
      const auto dets = detect(probe, det_features, model.detector, mc.detector, model.stride(),
                               img.width, img.height, mc.detector.score_threshold);
      for (const Detection& d : dets) {
        int best = -1;
        double best_iou = 0.5;
        for (std::size_t j = 0; j < gts.size(); ++j) {
          const double o = iou(d.box, gts[j]);
          if (o > best_iou) {
            best_iou = o;
            best = static_cast<int>(j);
          }
        }
        if (best >= 0) lines.emplace_back(d.box, sample.annotations[best].text);
      }
    }
    lb.lines = static_cast<int>(lines.size());
    if (!lines.empty()) {
      const Var rec_features = forward_branch(g, shared, mc.backbone, model.backbone, Branch::Recognizer);
      for (const auto& [box, text] : lines) {
        const Var l = line_ctc(g, rec_features, box, text, model);
        if (!l) {
          ++lb.skipped_lines;
          continue;
        }
        lb.ctc_var = lb.ctc_var ? add(g, lb.ctc_var, l) : l;
      }
    }
    if (lb.ctc_var) lb.ctc_total = lb.ctc_var->value.item();
  }

  if (lb.det_var && lb.ctc_var) {
    lb.total_var = add(g, lb.det_var, scale(g, lb.ctc_var, opts.lambda));
  } else if (lb.det_var) {
    lb.total_var = lb.det_var;
  } else if (lb.ctc_var) {
    lb.total_var = scale(g, lb.ctc_var, opts.lambda);
  } else {
    lb.total_var = constant(Tensor::scalar(0.0));
  }
  lb.total = lb.total_var->value.item();
  return lb;
}

TrainState initial_train_state(const TrainConfig& cfg) {
  TrainState s;
  s.rng.seed(cfg.seed);
  return s;
}

std::string phase_for_epoch(const TrainConfig& cfg, int epoch) {
  if (cfg.strategy == Strategy::Joint) return "joint";
  return epoch <= cfg.warmup_epochs ? "warmup" : "heads";
}

std::vector<EpochMetrics> train(Model& model, TrainState& state, std::span<const Sample> train_set,
                                std::span<const Sample> val_set, const TrainConfig& cfg,
                                const TrainHooks& hooks) {
  cfg.validate();
  if (train_set.empty()) throw ConfigError("train: empty training set");
  const std::vector<NamedParam> all = named_parameters(model);
  std::vector<NamedParam> shared;
  collect_shared_parameters(model.backbone, shared);

  std::vector<EpochMetrics> log;
  for (int epoch = state.epoch + 1; epoch <= cfg.epochs; ++epoch) {
    EpochMetrics em;
    em.epoch = epoch;
    em.phase = phase_for_epoch(cfg, epoch);

    LossOptions opts;
    opts.lambda = cfg.lambda;
    opts.gamma = cfg.gamma;
    opts.recognition_source = cfg.recognition_source;
    opts.box_jitter = cfg.box_jitter;
    std::vector<NamedParam> update;
    if (em.phase == "warmup") {
      opts.recognition = false;
      update = detection_parameters(model);
    } else if (em.phase == "heads") {
      opts.freeze_shared = true;
      for (const NamedParam& p : all) {
        if (!p.name.starts_with("backbone.shared.")) update.push_back(p);
      }
    } else {
      update = all;
    }

    AdamConfig adam = cfg.adam;
    if (cfg.lr_drop_epoch > 0 && epoch >= cfg.lr_drop_epoch) adam.lr *= cfg.lr_drop_factor;

    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[std::uniform_int_distribution<std::size_t>(0, i - 1)(state.rng)]);
    }

    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      for (const NamedParam& p : all) p.var->zero_grad();
      const std::size_t stop = std::min(order.size(), start + cfg.batch);
      for (std::size_t k = start; k < stop; ++k) {
        Graph g;
        const LossBreakdown lb = joint_loss(g, train_set[order[k]], model, opts, state.rng);
        const std::string where = " at epoch " + std::to_string(epoch) + ", image " + std::to_string(order[k]);
        check_finite(lb.det_total, "detection loss" + where);
        check_finite(lb.ctc_total, "recognition loss" + where);
        g.backward(lb.total_var);
        em.total += lb.total;
        em.det += lb.det_total;
        em.ctc += lb.ctc_total;
        em.skipped_lines += lb.skipped_lines;
      }
      adam_step(update, state.optimizer, adam);
    }
    for (const NamedParam& p : all) p.var->zero_grad();
    const double n = static_cast<double>(train_set.size());
    em.total /= n;
    em.det /= n;
    em.ctc /= n;
    if (!val_set.empty()) em.val_f_measure = evaluate(model, val_set).end_to_end.f_measure;
    state.epoch = epoch;
    log.push_back(em);
    if (hooks.on_epoch) hooks.on_epoch(model, state, em);
  }
  return log;
}

std::string recognize_region(const Var& features, const Box& region, const Model& model) {
  Graph g(false);
  const PooledTextFeature pooled = text_pool(g, features, region, model.stride(), model.config.pool);
  const Var logits = fcr_forward(g, pooled.data, model.fcr, model.config.recognizer);
  return greedy_decode(logits->value, model.codec);
}

std::vector<TextDetection> end_to_end_infer(const GrayImage& image, const Model& model,
                                            InferenceCounters* counters,
                                            std::vector<std::string>* warnings) {
  const Sample s{image, {}};
  return run_image(model, s, false, counters, warnings).accepted;
}

EvaluationResult evaluate(const Model& model, std::span<const Sample> samples) {
  std::vector<ImageOutcome> outcomes(samples.size());
  parallel_for(samples.size(), [&](std::size_t i) {
    outcomes[i] = run_image(model, samples[i], true, nullptr, nullptr);
  });

  EvaluationResult r;
  r.images = static_cast<int>(samples.size());
  std::vector<ScoredBox> all, accepted;
  std::vector<GtBox> gts;
  std::vector<EndToEndResult> e2e;
  std::vector<std::pair<std::string, std::string>> rec;
  std::size_t word_errors = 0, ref_words = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const int img = static_cast<int>(i);
    const ImageOutcome& o = outcomes[i];
    for (const TextDetection& d : o.all) all.push_back({d.box, d.score, img});
    for (const TextDetection& d : o.accepted) accepted.push_back({d.box, d.score, img});
    std::vector<GroundTruthLine> lines;
    std::vector<std::pair<Box, std::string>> ref, hyp;
    for (const Annotation& a : samples[i].annotations) {
      gts.push_back({a.box, img});
      lines.push_back({a.box, a.text});
      ref.emplace_back(a.box, a.text);
    }
    for (const TextDetection& d : o.accepted) hyp.emplace_back(d.box, d.text);
    e2e.push_back(match_end_to_end(o.accepted, lines));
    rec.insert(rec.end(), o.gt_recognition.begin(), o.gt_recognition.end());
    const auto rw = split_words(reading_order_text(ref));
    const auto hw = split_words(reading_order_text(hyp));
    word_errors += edit_distance(std::span<const std::string>(rw), std::span<const std::string>(hw));
    ref_words += rw.size();
  }
  r.ap = average_precision(all, gts);
  r.detection = match_detections(accepted, gts);
  r.recognition = seq_char_accuracy(rec);
  r.end_to_end = accumulate(e2e);
  if (ref_words > 0) r.wer = static_cast<double>(word_errors) / ref_words;
  return r;
}

Checkpoint make_checkpoint(const Model& model, const std::string& config_text,
                           const TrainState& state) {
  Checkpoint c;
  c.version = kCheckpointVersion;
  c.config_text = config_text;
  for (const NamedParam& p : named_parameters(model)) c.tensors.emplace_back(p.name, p.var->value);
  c.optimizer = state.optimizer;
  std::ostringstream rng;
  rng << state.rng;
  c.rng_state = rng.str();
  c.epoch = state.epoch;
  return c;
}

void restore_parameters(Model& model, const Checkpoint& ckpt) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : ckpt.tensors) by_name[name] = &t;
  const auto params = named_parameters(model);
  if (params.size() != ckpt.tensors.size()) {
    throw FormatError("checkpoint: holds " + std::to_string(ckpt.tensors.size()) +
                      " tensors, model expects " + std::to_string(params.size()));
  }
  for (const NamedParam& p : params) {
    const auto it = by_name.find(p.name);
    if (it == by_name.end()) throw FormatError("checkpoint: missing tensor " + p.name);
    if (it->second->shape() != p.var->value.shape()) {
      throw FormatError("checkpoint: shape mismatch for " + p.name);
    }
  }
  for (const NamedParam& p : params) p.var->value = *by_name[p.name];
}

TrainState restore_train_state(const Checkpoint& ckpt) {
  TrainState s;
  s.optimizer = ckpt.optimizer;
  std::istringstream in(ckpt.rng_state);
  in >> s.rng;
  if (!in) throw CorruptionError("checkpoint: unreadable RNG state");
  s.epoch = static_cast<int>(ckpt.epoch);
  return s;
}

std::string encode_checkpoint(const Checkpoint& c) {
  Writer w;
  for (char ch : kMagic) w.pod(ch);
  w.pod<std::uint32_t>(c.version);
  w.str(c.config_text);
  w.pod<std::uint64_t>(c.tensors.size());
  for (const auto& [name, t] : c.tensors) {
    w.str(name);
    w.tensor(t);
  }
  w.pod<std::uint64_t>(c.optimizer.moments.size());
  for (const auto& [name, m] : c.optimizer.moments) {
    w.str(name);
    w.pod<std::int64_t>(m.t);
    w.tensor(m.m);
    w.tensor(m.v);
  }
  w.str(c.rng_state);
  w.pod<std::int64_t>(c.epoch);
  return w.take();
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError("checkpoint: bad magic bytes");
  }
  Reader r(bytes);
  for (int i = 0; i < 4; ++i) (void)r.pod<char>();
  Checkpoint c;
  c.version = r.pod<std::uint32_t>();
  if (c.version != kCheckpointVersion) {
    throw FormatError("checkpoint: version " + std::to_string(c.version) + " is not supported");
  }
  c.config_text = r.str();
  const auto n = r.pod<std::uint64_t>();
  for (std::uint64_t i = 0; i < n; ++i) {
    std::string name = r.str();
    c.tensors.emplace_back(std::move(name), r.tensor());
  }
  const auto m = r.pod<std::uint64_t>();
  for (std::uint64_t i = 0; i < m; ++i) {
    std::string name = r.str();
    AdamMoments mo;
    mo.t = r.pod<std::int64_t>();
    mo.m = r.tensor();
    mo.v = r.tensor();
    c.optimizer.moments.emplace(std::move(name), std::move(mo));
  }
  c.rng_state = r.str();
  c.epoch = r.pod<std::int64_t>();
  if (!r.done()) throw CorruptionError("checkpoint: trailing bytes");
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const std::string bytes = encode_checkpoint(ckpt);
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot create " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw IoError("cannot move checkpoint into " + path.string());
  }
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

int worker_count() {
  if (const char* env = std::getenv("SHAREDTEXT_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(worker_count()), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (std::thread& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace sharedtext
