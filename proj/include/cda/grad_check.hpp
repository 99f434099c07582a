#pragma once

#include <functional>

#include "cda/graph.hpp"

namespace cda {

// Builds a scalar loss from a single differentiable input.
using ScalarFn = std::function<Value(Graph&, Value)>;

// Central-difference verification of reverse-mode gradients.
// Returns max over coordinates of |analytic - numeric| / max(1, |analytic|).
// Throws if any evaluation produces a non-finite value, naming the
// coordinate being perturbed.
double finite_difference_check(const ScalarFn& f, const Tensor& point, double step);

} // namespace cda
