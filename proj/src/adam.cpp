#include "ocd/adam.hpp"

#include <algorithm>

namespace ocd {

void adam_step(AdamState& state, std::span<const ParamSpan> params,
               std::span<const ParamSpan> grads, double lr) {
  if (params.size() != grads.size()) {
    throw DimensionError("adam: " + std::to_string(params.size()) +
                         " parameter tensors but " +
                         std::to_string(grads.size()) + " gradients");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].values.size() != grads[i].values.size()) {
      throw DimensionError("adam: gradient for '" + params[i].name +
                           "' has the wrong length");
    }
    const auto& g = grads[i].values;
    if (!std::all_of(g.begin(), g.end(), [](double v) { return std::isfinite(v); })) {
      throw NumericalError("adam: non-finite gradient in '" + params[i].name + "'");
    }
  }
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      const auto n = static_cast<Index>(p.values.size());
      state.first_moment.push_back(Vector::Zero(n));
      state.second_moment.push_back(Vector::Zero(n));
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw DimensionError("adam: optimizer state tracks a different parameter set");
  }

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto n = static_cast<Index>(params[i].values.size());
    Eigen::Map<Vector> p(params[i].values.data(), n);
    Eigen::Map<const Vector> g(grads[i].values.data(), n);
    Vector& m = state.first_moment[i];
    Vector& v = state.second_moment[i];
    if (m.size() != n) {
      throw DimensionError("adam: moment shape mismatch for '" + params[i].name + "'");
    }
    m = state.beta1 * m + (1.0 - state.beta1) * g;
    v = state.beta2 * v + (1.0 - state.beta2) * g.cwiseAbs2();
    p.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + state.eps);
  }
}

}  // namespace ocd
