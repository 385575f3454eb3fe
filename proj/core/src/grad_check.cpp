#include "sharedtext/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "sharedtext/errors.hpp"

namespace sharedtext {
namespace {

double evaluate(const ScalarFunction& f, std::span<const Var> inputs) {
  Graph g;
  const double v = f(g, inputs)->value.item();
  if (!std::isfinite(v)) throw NumericError("grad_check: non-finite function value");
  return v;
}

}  // namespace

double grad_check(const ScalarFunction& f, std::span<const Var> inputs,
                  const GradCheckOptions& options) {
  for (const Var& in : inputs) {
    if (!in->requires_grad) throw ConfigError("grad_check: every input must require grad");
    in->zero_grad();
  }
  {
    Graph g;
    Var out = f(g, inputs);
    if (!std::isfinite(out->value.item())) throw NumericError("grad_check: non-finite value");
    g.backward(out);
  }
  std::vector<Tensor> analytic;
  analytic.reserve(inputs.size());
  for (const Var& in : inputs) analytic.push_back(in->grad_buffer());

  std::mt19937_64 rng(options.seed);
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor& value = inputs[k]->value;
    std::vector<std::size_t> coords(value.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.coords_per_input > 0 && options.coords_per_input < coords.size()) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.coords_per_input);
    }
    for (std::size_t i : coords) {
      const double saved = value[i];
      value[i] = saved + options.eps;
      const double up = evaluate(f, inputs);
      value[i] = saved - options.eps;
      const double down = evaluate(f, inputs);
      value[i] = saved;
      const double numeric = (up - down) / (2.0 * options.eps);
      const double a = analytic[k][i];
      if (!std::isfinite(a)) throw NumericError("grad_check: non-finite analytic gradient");
      worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
    }
  }
  for (const Var& in : inputs) in->zero_grad();
  return worst;
}

}  // namespace sharedtext
