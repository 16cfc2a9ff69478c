#pragma once

#include "ocd/mlp.hpp"

namespace ocd {

enum class LossKind { SoftmaxCrossEntropy, MeanSquaredError };

/// Supervision for one sample: a class label or a regression vector.
struct Target {
  int label = -1;
  Vector value;

  static Target classification(int label) { return {label, {}}; }
  static Target regression(Vector v) { return {-1, std::move(v)}; }
};

struct LossResult {
  double loss = 0.0;
  Vector grad;  // d loss / d output
};

/// Softmax cross-entropy takes raw logits; MSE averages over components.
LossResult loss_eval(LossKind kind, const Vector& output, const Target& target);

LossKind loss_kind_for(OutputHead head);

/// Loss of a traced forward pass against its target, with the gradient
/// already taken w.r.t. the last layer's output.
LossResult trace_loss(const MlpModel& model, const ForwardTrace& trace,
                      const Target& target);

}  // namespace ocd
