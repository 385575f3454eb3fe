#include "sharedtext/recognizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "sharedtext/errors.hpp"
#include "sharedtext/ops.hpp"

namespace sharedtext {
namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

ConvParams init_conv(int cin, int cout, int kh, int kw, double std_dev, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, std_dev);
  Tensor w({cout, cin, kh, kw});
  for (double& v : w.values()) v = normal(rng);
  return {parameter(std::move(w)), parameter(Tensor({cout}, 0.0))};
}

void check_log_probs(const Tensor& lp, std::span<const int> label) {
  if (lp.rank() != 2) throw DimensionError("ctc: log_probs must be [T, classes]");
  const int classes = lp.dim(1);
  if (classes < 2) throw DimensionError("ctc: need a blank and at least one symbol");
  for (int id : label) {
    if (id <= AlphabetCodec::kBlank || id >= classes) {
      throw LookupError("ctc: label id " + std::to_string(id) + " outside 1.." +
                        std::to_string(classes - 1));
    }
  }
  if (!lp.all_finite()) throw NumericError("ctc: non-finite log probabilities");
}

}  // namespace

AlphabetCodec::AlphabetCodec(std::string symbols) : symbols_(std::move(symbols)) {
  if (symbols_.empty()) throw ConfigError("alphabet: no symbols");
  for (std::size_t i = 0; i < symbols_.size(); ++i) {
    const auto c = static_cast<unsigned char>(symbols_[i]);
    if (lookup_[c] != -1) throw ConfigError(std::string("alphabet: duplicate symbol '") + symbols_[i] + "'");
    lookup_[c] = static_cast<int>(i) + 1;
  }
}

std::vector<int> AlphabetCodec::encode(std::string_view text) const {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (char ch : text) {
    const int id = lookup_[static_cast<unsigned char>(ch)];
    if (id < 0) throw LookupError(std::string("alphabet: unknown symbol '") + ch + "'");
    ids.push_back(id);
  }
  return ids;
}

std::string AlphabetCodec::decode(std::span<const int> ids) const {
  std::string text;
  for (int id : ids) {
    if (id == kBlank) continue;
    if (id < 0 || id > static_cast<int>(symbols_.size())) {
      throw LookupError("alphabet: id " + std::to_string(id) + " out of range");
    }
    text.push_back(symbols_[id - 1]);
  }
  return text;
}

void RecognizerConfig::validate() const {
  if (channels < 1 || blocks < 0 || context_layers < 0) {
    throw ConfigError("recognizer: channels >= 1, blocks >= 0, context_layers >= 0 required");
  }
  if (context_kernel < 1 || context_kernel % 2 == 0) {
    throw ConfigError("recognizer: context_kernel must be odd");
  }
}

FcrParams init_fcr(int in_channels, int num_classes, const RecognizerConfig& cfg,
                   std::mt19937_64& rng) {
  cfg.validate();
  FcrParams p;
  int cin = in_channels;
  for (int b = 0; b < cfg.blocks; ++b) {
    p.blocks.push_back(init_conv(cin, cfg.channels, 3, 3, std::sqrt(2.0 / (9.0 * cin)), rng));
    cin = cfg.channels;
  }
  for (int c = 0; c < cfg.context_layers; ++c) {
    p.context.push_back(init_conv(cin, cfg.channels, 1, cfg.context_kernel,
                                  std::sqrt(2.0 / (cfg.context_kernel * cin)), rng));
    cin = cfg.channels;
  }
  p.classifier = init_conv(cin, num_classes, 1, 1, std::sqrt(1.0 / cin), rng);
  return p;
}

void collect_parameters(const FcrParams& p, std::vector<NamedParam>& out) {
  auto push = [&out](const std::string& name, const ConvParams& c) {
    out.push_back({name + ".weight", c.weight});
    out.push_back({name + ".bias", c.bias});
  };
  for (std::size_t i = 0; i < p.blocks.size(); ++i) push("fcr.block" + std::to_string(i), p.blocks[i]);
  for (std::size_t i = 0; i < p.context.size(); ++i) push("fcr.context" + std::to_string(i), p.context[i]);
  push("fcr.classifier", p.classifier);
}

Var fcr_forward(Graph& g, const Var& pooled, const FcrParams& p, const RecognizerConfig& cfg) {
  const Tensor& x = pooled->value;
  if (x.rank() != 4 || x.dim(0) != 1) {
    throw DimensionError("fcr: pooled features must be [1,C,H,W], got " + shape_string(x.shape()));
  }
  int h = x.dim(2);
  bool reducible = true;
  for (std::size_t b = 0; b < p.blocks.size() && reducible; ++b) {
    reducible = h >= 2;
    h /= 2;
  }
  if (!reducible || h != 1) {
    throw ConfigError("fcr: height " + std::to_string(x.dim(2)) + " is not reduced to 1 by " +
                      std::to_string(p.blocks.size()) + " 2x1 pools");
  }
  Var y = pooled;
  for (const ConvParams& c : p.blocks) {
    y = relu(g, conv2d(g, y, c.weight, c.bias, 1, 1));
    y = maxpool2d(g, y, PoolWindow{2, 1, 2, 1}).output;
  }
  const int half = cfg.context_kernel / 2;
  for (const ConvParams& c : p.context) {
    y = relu(g, conv2d(g, y, c.weight, c.bias, ConvGeometry{1, 0, half}));
  }
  y = conv2d(g, y, p.classifier.weight, p.classifier.bias, 1, 0);
  return to_rows(g, y, y->value.dim(1));
}

int required_frames(std::span<const int> label) {
  int n = static_cast<int>(label.size());
  for (std::size_t i = 1; i < label.size(); ++i) {
    if (label[i] == label[i - 1]) ++n;
  }
  return n;
}

CtcResult ctc_forward_backward(const Tensor& lp, std::span<const int> label) {
  check_log_probs(lp, label);
  const int frames = lp.dim(0), classes = lp.dim(1);
  if (frames < required_frames(label)) {
    throw InfeasibleLabelError("ctc: " + std::to_string(frames) + " frames cannot emit a label of " +
                               std::to_string(label.size()) + " symbols needing " +
                               std::to_string(required_frames(label)));
  }
  const int states = 2 * static_cast<int>(label.size()) + 1;
  auto sym = [&](int s) { return s % 2 == 0 ? AlphabetCodec::kBlank : label[s / 2]; };
  auto can_skip = [&](int s) { return s >= 2 && s % 2 == 1 && sym(s) != sym(s - 2); };
  auto emit = [&](int t, int s) { return lp[static_cast<std::size_t>(t) * classes + sym(s)]; };

  CtcResult r;
  r.frames = frames;
  r.states = states;
  r.log_alpha.assign(static_cast<std::size_t>(frames) * states, kNegInf);
  r.log_beta.assign(static_cast<std::size_t>(frames) * states, kNegInf);
  auto A = [&](int t, int s) -> double& { return r.log_alpha[static_cast<std::size_t>(t) * states + s]; };
  auto B = [&](int t, int s) -> double& { return r.log_beta[static_cast<std::size_t>(t) * states + s]; };

  A(0, 0) = emit(0, 0);
  if (states > 1) A(0, 1) = emit(0, 1);
  for (int t = 1; t < frames; ++t) {
    for (int s = 0; s < states; ++s) {
      double acc = A(t - 1, s);
      if (s >= 1) acc = log_add(acc, A(t - 1, s - 1));
      if (can_skip(s)) acc = log_add(acc, A(t - 1, s - 2));
      A(t, s) = acc == kNegInf ? kNegInf : acc + emit(t, s);
    }
  }
  r.log_p = A(frames - 1, states - 1);
  if (states > 1) r.log_p = log_add(r.log_p, A(frames - 1, states - 2));
  if (r.log_p == kNegInf) throw InfeasibleLabelError("ctc: label has zero probability");
  r.loss = -r.log_p;

  B(frames - 1, states - 1) = 0.0;
  if (states > 1) B(frames - 1, states - 2) = 0.0;
  for (int t = frames - 2; t >= 0; --t) {
    for (int s = 0; s < states; ++s) {
      double acc = B(t + 1, s) == kNegInf ? kNegInf : B(t + 1, s) + emit(t + 1, s);
      if (s + 1 < states && B(t + 1, s + 1) != kNegInf) {
        acc = log_add(acc, B(t + 1, s + 1) + emit(t + 1, s + 1));
      }
      if (s + 2 < states && can_skip(s + 2) && B(t + 1, s + 2) != kNegInf) {
        acc = log_add(acc, B(t + 1, s + 2) + emit(t + 1, s + 2));
      }
      B(t, s) = acc;
    }
  }

  r.grad = Tensor({frames, classes}, 0.0);
  for (int t = 0; t < frames; ++t) {
    for (int s = 0; s < states; ++s) {
      const double la = A(t, s) + B(t, s);
      if (la == kNegInf) continue;
      r.grad[static_cast<std::size_t>(t) * classes + sym(s)] -= std::exp(la - r.log_p);
    }
  }
  return r;
}

Var ctc_loss(Graph& g, const Var& log_probs, std::span<const int> label) {
  CtcResult r = ctc_forward_backward(log_probs->value, label);
  auto grad = std::make_shared<Tensor>(std::move(r.grad));
  return g.record(Tensor::scalar(r.loss), {log_probs}, [log_probs, grad](const Tensor& gout) {
    Tensor& gin = log_probs->grad_buffer();
    const double s = gout[0];
    for (std::size_t i = 0; i < gin.size(); ++i) gin[i] += s * (*grad)[i];
  });
}

double ctc_brute_force(const Tensor& lp, std::span<const int> label) {
  check_log_probs(lp, label);
  const int frames = lp.dim(0), classes = lp.dim(1);
  double combos = 1.0;
  for (int t = 0; t < frames; ++t) combos *= classes;
  if (combos > 1e6) throw SizeError("ctc_brute_force: classes^T exceeds 1e6");

  std::vector<int> path(frames, 0);
  std::vector<int> collapsed;
  double total = 0.0;
  for (long long code = 0; code < static_cast<long long>(combos); ++code) {
    long long rest = code;
    for (int t = frames - 1; t >= 0; --t) {
      path[t] = static_cast<int>(rest % classes);
      rest /= classes;
    }
    collapsed.clear();
    int prev = -1;
    for (int c : path) {
      if (c != prev && c != AlphabetCodec::kBlank) collapsed.push_back(c);
      prev = c;
    }
    if (collapsed.size() != label.size() ||
        !std::equal(collapsed.begin(), collapsed.end(), label.begin())) {
      continue;
    }
    double logp = 0.0;
    for (int t = 0; t < frames; ++t) logp += lp[static_cast<std::size_t>(t) * classes + path[t]];
    total += std::exp(logp);
  }
  return total > 0.0 ? -std::log(total) : std::numeric_limits<double>::infinity();
}

std::vector<int> best_path(const Tensor& lp) {
  if (lp.rank() != 2) throw DimensionError("greedy_decode: log_probs must be [T, classes]");
  const int frames = lp.dim(0), classes = lp.dim(1);
  std::vector<int> ids;
  int prev = -1;
  for (int t = 0; t < frames; ++t) {
    const double* row = lp.data() + static_cast<std::size_t>(t) * classes;
    int best = 0;
    for (int c = 1; c < classes; ++c) {
      if (row[c] > row[best]) best = c;
    }
    if (best != prev && best != AlphabetCodec::kBlank) ids.push_back(best);
    prev = best;
  }
  return ids;
}

std::string greedy_decode(const Tensor& log_probs, const AlphabetCodec& codec) {
  return codec.decode(best_path(log_probs));
}

}  // namespace sharedtext
