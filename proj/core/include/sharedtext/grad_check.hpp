#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>

#include "sharedtext/tensor.hpp"

namespace sharedtext {

// Builds a scalar from `inputs` on a fresh graph.
using ScalarFunction = std::function<Var(Graph&, std::span<const Var>)>;

struct GradCheckOptions {
  double eps = 1e-6;
  // 0 checks every coordinate; otherwise this many coordinates per input,
  // drawn with `seed`.
  std::size_t coords_per_input = 0;
  std::uint64_t seed = 0;
};

// Max over checked coordinates of |analytic - central difference| /
// max(1, |analytic|). Inputs must require grad; their values are restored.
double grad_check(const ScalarFunction& f, std::span<const Var> inputs,
                  const GradCheckOptions& options = {});

}  // namespace sharedtext
