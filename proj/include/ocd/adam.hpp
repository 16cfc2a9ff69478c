#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ocd/mlp.hpp"

namespace ocd {

struct AdamState {
  std::int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::vector<Vector> first_moment;
  std::vector<Vector> second_moment;
};

/// One bias-corrected Adam update, in place.
///
/// `params` and `grads` are matched by position and must agree in length.
/// Moments are allocated on the first call. A non-finite gradient aborts
/// the step before anything is modified.
void adam_step(AdamState& state, std::span<const ParamSpan> params,
               std::span<const ParamSpan> grads, double lr);

}  // namespace ocd
