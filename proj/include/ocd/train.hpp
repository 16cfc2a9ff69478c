#pragma once

#include <vector>

#include "ocd/datasets.hpp"
#include "ocd/mlp.hpp"

namespace ocd {

struct TrainOptions {
  int epochs = 30;
  int batch_size = 32;
  double lr = 1e-3;
};

/// Minibatch Adam on the loss matching the model's output head.
/// Returns the mean training loss of every epoch.
std::vector<double> train_mlp(MlpModel& model, const Dataset& train,
                              const TrainOptions& opts, RngStream& rng);

struct Metrics {
  double loss = 0.0;      // mean CE or MSE
  double accuracy = 0.0;  // classification only
};

Metrics evaluate(const MlpModel& model, const Dataset& data);

}  // namespace ocd
