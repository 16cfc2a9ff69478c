#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "ocd/adam.hpp"
#include "ocd/overfit.hpp"

namespace ocd {

/// Predicts the delta magnitude rho from concat(x, i_L, a_L, out). The MLP
/// outputs log rho on standardized features; its first layer plays the role
/// of the conditioning encoders and is not shared with the denoiser.
struct ScaleModel {
  MlpModel net;
  Vector feature_mean;
  Vector feature_std;
  double rho_bar = 0.0;  // mean rho of the training records
  AdamState adam;

  Index input_dim() const { return net.spec.input_size(); }
};

Vector scale_features(const Vector& x, const ConditioningTuple& c);

/// Predicted rho, always > 0.
double scale_forward(const ScaleModel& model, const Vector& x, const ConditioningTuple& c);

constexpr double kScaleLossFloorDb = -120.0;

/// 10 log10((rho_hat - rho)^2 / rho^2), floored at -120 dB. Throws for rho <= 0.
double scale_loss(double rho_hat, double rho);

/// d scale_loss / d rho_hat; zero on the floor.
double scale_loss_derivative(double rho_hat, double rho);

struct ScaleTrainOptions {
  std::vector<Index> hidden{64, 64};
  int epochs = 30;
  int batch_size = 32;
  double lr = 1e-3;
  double clip = 10.0;
};

/// Untrained model sized for the store: Glorot hidden weights, feature
/// statistics from the records, zero output weights and the output bias at
/// the mean log rho, so it starts as the constant geometric-mean predictor.
ScaleModel init_scale(const RecordStore& store, const std::vector<Index>& hidden, RngStream& rng);

/// Mean scale_loss over the batch; `grads` receives its gradient. A positive
/// `clip` bounds each record's derivative with respect to log rho_hat, which
/// is otherwise unbounded as rho_hat approaches rho; 0 gives the exact gradient.
double scale_batch_loss(const ScaleModel& model, std::span<const OverfitRecord* const> batch,
                        MlpGradients& grads, double clip = 0.0);

struct ScaleTrainResult {
  ScaleModel model;
  std::vector<double> history;  // mean dB per epoch
};

ScaleTrainResult train_scale(const RecordStore& store, const ScaleTrainOptions& opts, RngStream& rng);

void save_scale(const std::filesystem::path& dir, const ScaleModel& model);
ScaleModel load_scale(const std::filesystem::path& dir);

}  // namespace ocd
