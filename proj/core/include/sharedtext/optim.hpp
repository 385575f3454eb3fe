#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>

#include "sharedtext/tensor.hpp"

namespace sharedtext {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamMoments {
  Tensor m;
  Tensor v;
  std::int64_t t = 0;
};

struct NamedParam {
  std::string name;
  Var var;
};

// Optimizer state keyed by parameter name. Each parameter keeps its own step
// count, so parameters that join training late get a fresh bias correction.
struct AdamState {
  std::map<std::string, AdamMoments> moments;
};

// One bias-corrected Adam update of `param` from `grad`.
void adam_update(Tensor& param, const Tensor& grad, AdamMoments& moments, const AdamConfig& cfg);

// Updates every listed parameter from its accumulated gradient.
void adam_step(std::span<const NamedParam> params, AdamState& state, const AdamConfig& cfg);

void validate(const AdamConfig& cfg);

}  // namespace sharedtext
