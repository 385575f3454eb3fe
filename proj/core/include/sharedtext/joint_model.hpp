#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "sharedtext/backbone.hpp"
#include "sharedtext/detector.hpp"
#include "sharedtext/evaluation.hpp"
#include "sharedtext/optim.hpp"
#include "sharedtext/recognizer.hpp"
#include "sharedtext/synth_data.hpp"
#include "sharedtext/text_pool.hpp"

namespace sharedtext {

struct ModelConfig {
  BackboneConfig backbone = default_backbone();
  DetectorConfig detector;
  TextPoolConfig pool;
  RecognizerConfig recognizer;
  std::string alphabet = "ABCDEFGHIJKL";

  static BackboneConfig default_backbone();
  void validate() const;
};

struct Model {
  ModelConfig config;
  BackboneParams backbone;
  DetectorParams detector;
  FcrParams fcr;
  AlphabetCodec codec;

  int stride() const { return config.backbone.total_stride(); }
};

Model init_model(const ModelConfig& cfg, std::uint64_t seed);

// Every trainable tensor under a stable, unique name.
std::vector<NamedParam> named_parameters(const Model& model);
// Parameters fed by the detection loss alone / recognition loss alone.
std::vector<NamedParam> detection_parameters(const Model& model);
std::vector<NamedParam> recognition_parameters(const Model& model);

enum class Strategy { Joint, Separate };
enum class RecognitionSource { GroundTruth, Detections };

std::string strategy_name(Strategy s);
Strategy parse_strategy(const std::string& text);
std::string recognition_source_name(RecognitionSource s);
RecognitionSource parse_recognition_source(const std::string& text);

struct TrainConfig {
  double lambda = 1.0;
  double gamma = 1.0;
  AdamConfig adam;
  int epochs = 10;
  int batch = 1;  // images whose gradients are summed per update
  std::uint64_t seed = 1;
  Strategy strategy = Strategy::Joint;
  int warmup_epochs = 2;  // separate strategy: detection-only epochs
  RecognitionSource recognition_source = RecognitionSource::GroundTruth;
  double box_jitter = 0.5;  // recognition boxes: edges pushed out by up to this x box height
  int lr_drop_epoch = 0;  // from this epoch on the step size is scaled; 0 keeps it constant
  double lr_drop_factor = 0.1;

  void validate() const;
};

struct LossBreakdown {
  Var total_var;
  Var det_var;
  Var ctc_var;  // null when no line contributed
  double total = 0.0;
  double det_total = 0.0;
  double ctc_total = 0.0;
  double cls = 0.0;
  double reg = 0.0;
  int lines = 0;
  int skipped_lines = 0;
};

struct LossOptions {
  double lambda = 1.0;
  double gamma = 1.0;
  RecognitionSource recognition_source = RecognitionSource::GroundTruth;
  double box_jitter = 0.0;
  bool detection = true;
  bool recognition = true;
  bool freeze_shared = false;  // the shared prefix gets no gradient
};

// total = det_total + lambda * ctc_total for one image. Lines whose text
// cannot be emitted in the pooled width are skipped and counted.
LossBreakdown joint_loss(Graph& g, const Sample& sample, const Model& model,
                         const LossOptions& opts, std::mt19937_64& rng);

struct EpochMetrics {
  int epoch = 0;  // 1-based
  std::string phase;  // joint, warmup or heads
  double total = 0.0;  // means per image
  double det = 0.0;
  double ctc = 0.0;
  int skipped_lines = 0;
  std::optional<double> val_f_measure;
};

struct TrainState {
  AdamState optimizer;
  std::mt19937_64 rng;
  int epoch = 0;  // completed epochs
};

TrainState initial_train_state(const TrainConfig& cfg);

struct TrainHooks {
  // Called after every epoch with the state that a resumed run would load.
  std::function<void(const Model&, const TrainState&, const EpochMetrics&)> on_epoch;
};

// Trains from state.epoch up to cfg.epochs. Throws NumericError on a
// non-finite loss.
std::vector<EpochMetrics> train(Model& model, TrainState& state, std::span<const Sample> train_set,
                                std::span<const Sample> val_set, const TrainConfig& cfg,
                                const TrainHooks& hooks = {});

std::string phase_for_epoch(const TrainConfig& cfg, int epoch);

struct InferenceCounters {
  ForwardCounters forward;
  std::size_t detections = 0;
  std::size_t recognized = 0;
  std::size_t skipped_regions = 0;
};

std::vector<TextDetection> end_to_end_infer(const GrayImage& image, const Model& model,
                                            InferenceCounters* counters = nullptr,
                                            std::vector<std::string>* warnings = nullptr);

// Transcription of a known region from the recognizer branch.
std::string recognize_region(const Var& recognizer_features, const Box& region, const Model& model);

struct EvaluationResult {
  std::optional<double> ap;
  DetectionCounts detection;
  SeqCharAccuracy recognition;
  EndToEndResult end_to_end;
  std::optional<double> wer;  // empty when no reference words
  int images = 0;
};

EvaluationResult evaluate(const Model& model, std::span<const Sample> samples);

struct Checkpoint {
  std::uint32_t version = 1;
  std::string config_text;
  std::vector<std::pair<std::string, Tensor>> tensors;
  AdamState optimizer;
  std::string rng_state;
  std::int64_t epoch = 0;
};

Checkpoint make_checkpoint(const Model& model, const std::string& config_text,
                           const TrainState& state);
// Copies tensors into an initialised model; names and shapes must match.
void restore_parameters(Model& model, const Checkpoint& ckpt);
TrainState restore_train_state(const Checkpoint& ckpt);

std::string encode_checkpoint(const Checkpoint& ckpt);
// FormatError on wrong magic or version, CorruptionError on truncation.
Checkpoint decode_checkpoint(const std::string& bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Runs fn(i) for i in [0, n) on up to worker_count() threads.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);
// SHAREDTEXT_THREADS if set, otherwise the hardware concurrency.
int worker_count();

}  // namespace sharedtext
