#include "ocd/train.hpp"

#include "ocd/adam.hpp"
#include "ocd/loss.hpp"

namespace ocd {

std::vector<double> train_mlp(MlpModel& model, const Dataset& train,
                              const TrainOptions& opts, RngStream& rng) {
  if (train.size() == 0) throw std::invalid_argument("train_mlp: empty dataset");
  const auto n = static_cast<std::size_t>(train.size());
  AdamState adam;
  std::vector<double> history;
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;

  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.uniform_index(i)]);
    double total = 0.0;
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(opts.batch_size)) {
      const std::size_t end = std::min(n, start + static_cast<std::size_t>(opts.batch_size));
      MlpGradients acc;
      for (std::size_t k = start; k < end; ++k) {
        const auto i = static_cast<Index>(order[k]);
        const auto trace = mlp_forward(model, train.input(i));
        const auto loss = trace_loss(model, trace, train.target(i));
        total += loss.loss;
        auto g = mlp_backward(model, trace, loss.grad);
        if (acc.empty()) {
          acc = std::move(g);
        } else {
          for (std::size_t l = 0; l < acc.size(); ++l) {
            acc[l].weight += g[l].weight;
            acc[l].bias += g[l].bias;
          }
        }
      }
      const double scale = 1.0 / static_cast<double>(end - start);
      for (auto& layer : acc) {
        layer.weight *= scale;
        layer.bias *= scale;
      }
      const auto params = parameter_spans(model);
      const auto grads = gradient_spans(acc);
      adam_step(adam, params, grads, opts.lr);
    }
    history.push_back(total / static_cast<double>(n));
  }
  return history;
}

Metrics evaluate(const MlpModel& model, const Dataset& data) {
  Metrics m;
  if (data.size() == 0) return m;
  Index correct = 0;
  for (Index i = 0; i < data.size(); ++i) {
    const auto trace = mlp_forward(model, data.input(i));
    m.loss += trace_loss(model, trace, data.target(i)).loss;
    if (data.task == TaskKind::Classification) {
      Index arg = 0;
      trace.output.maxCoeff(&arg);
      if (arg == data.labels[static_cast<std::size_t>(i)]) ++correct;
    }
  }
  m.loss /= static_cast<double>(data.size());
  m.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  return m;
}

}  // namespace ocd
