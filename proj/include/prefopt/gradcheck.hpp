#pragma once

#include <functional>
#include <vector>

#include "prefopt/rng.hpp"
#include "prefopt/tensor.hpp"

namespace prefopt {

/// Central-finite-difference check of reverse-mode gradients.
///
/// `forward` must rebuild the loss graph from the current parameter values and
/// be deterministic given them. Samples at least `n_coords` random coordinates
/// across all parameters (all of them when there are fewer) and returns the
/// maximum of |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
/// Throws if any function evaluation is non-finite, naming the coordinate.
double grad_check(const std::function<Tensor()>& forward, const std::vector<Tensor>& params,
                  double h, Rng rng, int n_coords = 100);

}  // namespace prefopt
