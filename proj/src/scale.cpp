#include "ocd/scale.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "ocd/checkpoint.hpp"
#include "ocd/error.hpp"

namespace ocd {

namespace fs = std::filesystem;

Vector scale_features(const Vector& x, const ConditioningTuple& c) {
  Vector f(x.size() + c.layer_input.size() + c.activation.size() + c.output.size());
  f << x, c.layer_input, c.activation, c.output;
  return f;
}

namespace {

Vector standardized(const ScaleModel& m, const Vector& x, const ConditioningTuple& c) {
  const Vector f = scale_features(x, c);
  if (f.size() != m.input_dim()) {
    throw DimensionError("scale model expects " + std::to_string(m.input_dim()) +
                         " features, got " + std::to_string(f.size()));
  }
  return ((f - m.feature_mean).array() / m.feature_std.array()).matrix();
}

}  // namespace

double scale_forward(const ScaleModel& model, const Vector& x, const ConditioningTuple& c) {
  return std::exp(mlp_forward(model.net, standardized(model, x, c)).output[0]);
}

double scale_loss(double rho_hat, double rho) {
  if (!(rho > 0.0)) throw std::invalid_argument("scale_loss: rho must be positive");
  const double r = (rho_hat - rho) / rho;
  return std::max(kScaleLossFloorDb, 10.0 * std::log10(r * r));
}

double scale_loss_derivative(double rho_hat, double rho) {
  if (scale_loss(rho_hat, rho) <= kScaleLossFloorDb) return 0.0;
  return 20.0 / (std::numbers::ln10 * (rho_hat - rho));
}

ScaleModel init_scale(const RecordStore& store, const std::vector<Index>& hidden, RngStream& rng) {
  if (store.records.empty()) throw std::invalid_argument("init_scale: empty record store");
  const auto n = static_cast<double>(store.records.size());
  const Index d = scale_features(store.records[0].x, store.records[0].cond).size();

  ScaleModel m;
  m.feature_mean = Vector::Zero(d);
  Vector sq = Vector::Zero(d);
  double log_rho = 0.0;
  for (const auto& r : store.records) {
    const Vector f = scale_features(r.x, r.cond);
    m.feature_mean += f;
    sq += f.cwiseProduct(f);
    log_rho += std::log(r.rho);
  }
  m.feature_mean /= n;
  m.feature_std = (sq / n - m.feature_mean.cwiseProduct(m.feature_mean)).cwiseMax(0.0).cwiseSqrt();
  for (Index i = 0; i < d; ++i) {
    if (m.feature_std[i] <= 1e-12) m.feature_std[i] = 1.0;
  }
  m.rho_bar = store.mean_rho();

  MlpSpec spec{{d}, Activation::Tanh, OutputHead::LinearRegressor};
  for (Index h : hidden) spec.layer_sizes.push_back(h);
  spec.layer_sizes.push_back(1);
  m.net = init_mlp(spec, rng);
  m.net.layers.back().weight.setZero();
  m.net.layers.back().bias[0] = log_rho / n;
  return m;
}

double scale_batch_loss(const ScaleModel& model, std::span<const OverfitRecord* const> batch,
                        MlpGradients& grads, double clip) {
  if (batch.empty()) throw std::invalid_argument("scale_batch_loss: empty batch");
  grads.clear();
  for (const auto& l : model.net.layers) {
    grads.push_back({Matrix::Zero(l.weight.rows(), l.weight.cols()), Vector::Zero(l.bias.size())});
  }
  const auto n = static_cast<double>(batch.size());
  double total = 0.0;
  for (const OverfitRecord* r : batch) {
    const ForwardTrace tr = mlp_forward(model.net, standardized(model, r->x, r->cond));
    const double rho_hat = std::exp(tr.output[0]);
    total += scale_loss(rho_hat, r->rho);
    double d = scale_loss_derivative(rho_hat, r->rho) * rho_hat;
    if (clip > 0.0) d = std::clamp(d, -clip, clip);
    Vector g(1);
    g[0] = d / n;
    const MlpGradients one = mlp_backward(model.net, tr, g);
    for (std::size_t l = 0; l < grads.size(); ++l) {
      grads[l].weight += one[l].weight;
      grads[l].bias += one[l].bias;
    }
  }
  const double loss = total / n;
  if (!std::isfinite(loss)) throw NumericalError("scale_batch_loss: non-finite loss");
  return loss;
}

ScaleTrainResult train_scale(const RecordStore& store, const ScaleTrainOptions& opts, RngStream& rng) {
  ScaleTrainResult res{init_scale(store, opts.hidden, rng), {}};
  std::vector<const OverfitRecord*> order;
  for (const auto& r : store.records) order.push_back(&r);
  const auto bs = static_cast<std::size_t>(opts.batch_size);
  MlpGradients grads;
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.uniform_index(i)]);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t end = std::min(order.size(), start + bs);
      const std::span<const OverfitRecord* const> batch(order.data() + start, end - start);
      total += scale_batch_loss(res.model, batch, grads, opts.clip) * static_cast<double>(end - start);
      const auto params = parameter_spans(res.model.net);
      const auto gs = gradient_spans(grads);
      adam_step(res.model.adam, params, gs, opts.lr);
    }
    res.history.push_back(total / static_cast<double>(order.size()));
  }
  return res;
}

void save_scale(const fs::path& dir, const ScaleModel& model) {
  Checkpoint ck;
  put_model(ck, "net.", model.net);
  ck.meta["format"] = "ocd-scale/1";
  ck.meta["rho_bar"] = model.rho_bar;
  ck.tensors["feature_mean"] = TensorF({model.feature_mean.size()}, model.feature_mean);
  ck.tensors["feature_std"] = TensorF({model.feature_std.size()}, model.feature_std);
  save_checkpoint(dir, ck);
}

ScaleModel load_scale(const fs::path& dir) {
  const Checkpoint ck = load_checkpoint(dir);
  if (ck.meta.value("format", "") != "ocd-scale/1") throw FormatError("not a scale model: " + dir.string());
  ScaleModel m;
  m.net = get_model(ck, "net.");
  m.rho_bar = ck.meta.at("rho_bar").get<double>();
  m.feature_mean = ck.tensor("feature_mean").data();
  m.feature_std = ck.tensor("feature_std").data();
  if (m.feature_mean.size() != m.input_dim() || m.feature_std.size() != m.input_dim()) {
    throw FormatError("scale model feature statistics disagree with the network in " + dir.string());
  }
  return m;
}

}  // namespace ocd
