#include "sharedtext/optim.hpp"

#include <cmath>

#include "sharedtext/errors.hpp"

namespace sharedtext {

void validate(const AdamConfig& cfg) {
  if (!(cfg.lr > 0.0)) throw ConfigError("adam: learning rate must be positive");
  if (!(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0) || !(cfg.beta2 >= 0.0 && cfg.beta2 < 1.0)) {
    throw ConfigError("adam: betas must lie in [0, 1)");
  }
  if (!(cfg.eps > 0.0)) throw ConfigError("adam: eps must be positive");
}

void adam_update(Tensor& param, const Tensor& grad, AdamMoments& mo, const AdamConfig& cfg) {
  validate(cfg);
  if (!param.same_shape(grad)) {
    throw DimensionError("adam: gradient shape " + shape_string(grad.shape()) +
                         " does not match parameter " + shape_string(param.shape()));
  }
  if (mo.m.empty()) {
    mo.m = Tensor(param.shape(), 0.0);
    mo.v = Tensor(param.shape(), 0.0);
  } else if (!mo.m.same_shape(param) || !mo.v.same_shape(param)) {
    throw DimensionError("adam: state shape does not match parameter");
  }
  mo.t += 1;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(mo.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(mo.t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    mo.m[i] = cfg.beta1 * mo.m[i] + (1.0 - cfg.beta1) * g;
    mo.v[i] = cfg.beta2 * mo.v[i] + (1.0 - cfg.beta2) * g * g;
    const double mhat = mo.m[i] / c1;
    const double vhat = mo.v[i] / c2;
    param[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

void adam_step(std::span<const NamedParam> params, AdamState& state, const AdamConfig& cfg) {
  validate(cfg);
  for (const NamedParam& p : params) {
    Node& node = *p.var;
    adam_update(node.value, node.grad_buffer(), state.moments[p.name], cfg);
  }
}

}  // namespace sharedtext
