#include "ocd/loss.hpp"

namespace ocd {

LossResult loss_eval(LossKind kind, const Vector& output, const Target& target) {
  LossResult r;
  if (kind == LossKind::SoftmaxCrossEntropy) {
    if (target.label < 0 || target.label >= output.size()) {
      throw std::out_of_range("label " + std::to_string(target.label) +
                              " outside [0, " + std::to_string(output.size()) +
                              ")");
    }
    const double peak = output.maxCoeff();
    Vector p = (output.array() - peak).exp();
    const double z = p.sum();
    p /= z;
    r.loss = -(output[target.label] - peak - std::log(z));
    r.grad = p;
    r.grad[target.label] -= 1.0;
    return r;
  }
  if (target.value.size() != output.size()) {
    throw DimensionError("regression target has length " +
                         std::to_string(target.value.size()) + ", output has " +
                         std::to_string(output.size()));
  }
  const Vector diff = output - target.value;
  const double k = static_cast<double>(output.size());
  r.loss = diff.squaredNorm() / k;
  r.grad = 2.0 * diff / k;
  return r;
}

LossKind loss_kind_for(OutputHead head) {
  return head == OutputHead::SoftmaxClassifier ? LossKind::SoftmaxCrossEntropy
                                               : LossKind::MeanSquaredError;
}

LossResult trace_loss(const MlpModel& model, const ForwardTrace& trace,
                      const Target& target) {
  return loss_eval(loss_kind_for(model.spec.output_head), trace.logits(), target);
}

}  // namespace ocd
