#pragma once

#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sharedtext/backbone.hpp"
#include "sharedtext/tensor.hpp"
#include "sharedtext/text_pool.hpp"

namespace sharedtext {

// Maps single-character glyph labels to class ids 1..n; id 0 is the CTC blank.
class AlphabetCodec {
 public:
  static constexpr int kBlank = 0;

  AlphabetCodec() = default;
  explicit AlphabetCodec(std::string symbols);

  const std::string& symbols() const noexcept { return symbols_; }
  int num_classes() const noexcept { return static_cast<int>(symbols_.size()) + 1; }

  std::vector<int> encode(std::string_view text) const;
  // Blank ids are skipped.
  std::string decode(std::span<const int> ids) const;

 private:
  std::string symbols_;
  std::vector<int> lookup_ = std::vector<int>(256, -1);
};

struct RecognizerConfig {
  int channels = 64;
  int blocks = 3;          // [3x3 conv, relu, 2x1 max pool] halving height
  int context_layers = 2;  // 1 x context_kernel convs mixing neighbouring frames
  int context_kernel = 3;

  void validate() const;
};

struct FcrParams {
  std::vector<ConvParams> blocks;
  std::vector<ConvParams> context;
  ConvParams classifier;
};

FcrParams init_fcr(int in_channels, int num_classes, const RecognizerConfig& cfg,
                   std::mt19937_64& rng);
void collect_parameters(const FcrParams& params, std::vector<NamedParam>& out);

// Frame logits [T, classes] for a pooled region [1, C, H, W]; T == W because
// every pool acts on height only. Throws ConfigError when the blocks cannot
// bring H down to exactly 1.
Var fcr_forward(Graph& g, const Var& pooled, const FcrParams& params, const RecognizerConfig& cfg);

// Frames needed to emit `label`: its length plus one per adjacent repeat.
int required_frames(std::span<const int> label);

struct CtcResult {
  double loss = 0.0;   // -log p(label)
  double log_p = 0.0;
  int frames = 0;
  int states = 0;      // 2 * len + 1
  // log alpha(t, s) includes the emission at t; log beta(t, s) covers frames
  // after t only, so sum_s alpha * beta == p for every t. Row-major [T, S].
  std::vector<double> log_alpha;
  std::vector<double> log_beta;
  Tensor grad;  // d loss / d log_probs, [T, classes]
};

// Log-space forward-backward over the blank-augmented label. log_probs is
// [T, classes] of normalised log probabilities. Throws InfeasibleLabelError
// when T < required_frames(label).
CtcResult ctc_forward_backward(const Tensor& log_probs, std::span<const int> label);

// Differentiable -log p(label) as a graph op.
Var ctc_loss(Graph& g, const Var& log_probs, std::span<const int> label);

// Sums every length-T class sequence collapsing to `label`. Requires
// classes^T <= 1e6 (SizeError otherwise). Returns +inf for unreachable labels.
double ctc_brute_force(const Tensor& log_probs, std::span<const int> label);

// Per-frame argmax (first on ties), repeats collapsed, blanks removed.
std::vector<int> best_path(const Tensor& log_probs);
std::string greedy_decode(const Tensor& log_probs, const AlphabetCodec& codec);

}  // namespace sharedtext
