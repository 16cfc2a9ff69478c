#include "ocd/hyperdiff.hpp"

#include <cmath>

#include "ocd/checkpoint.hpp"
#include "ocd/error.hpp"

namespace ocd {

namespace fs = std::filesystem;
using nlohmann::json;

NoiseSchedule build_schedule(int T) {
  if (T < 2) throw std::invalid_argument("build_schedule: T must be >= 2, got " + std::to_string(T));
  NoiseSchedule s;
  s.T = T;
  const auto n = static_cast<std::size_t>(T) + 1;
  s.beta.assign(n, 0.0);
  s.alpha.assign(n, 1.0);
  s.alpha_bar.assign(n, 1.0);
  s.beta_tilde.assign(n, 0.0);
  for (int t = 1; t <= T; ++t) {
    const auto i = static_cast<std::size_t>(t);
    s.beta[i] = (1e-4 * (T - t) + 1e-2 * (t - 1)) / (T - 1);
    s.alpha[i] = 1.0 - s.beta[i];
    s.alpha_bar[i] = s.alpha_bar[i - 1] * s.alpha[i];
    s.beta_tilde[i] = (1.0 - s.alpha_bar[i - 1]) / (1.0 - s.alpha_bar[i]) * s.beta[i];
  }
  return s;
}

Vector pos_encode(double t, Index d) {
  if (d <= 0 || d % 2 != 0) throw DimensionError("pos_encode: dimension must be even and positive");
  Vector v(d);
  for (Index i = 0; i < d / 2; ++i) {
    const double freq = std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(d));
    v[2 * i] = std::sin(t / freq);
    v[2 * i + 1] = std::cos(t / freq);
  }
  return v;
}

namespace {

DenseLayer affine_init(Index in, Index out, RngStream& rng) {
  DenseLayer l{Matrix(out, in), Vector::Zero(out)};
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  for (Index i = 0; i < l.weight.size(); ++i) l.weight.data()[i] = bound * (2.0 * rng.uniform() - 1.0);
  return l;
}

DenseLayer zeros_like(const DenseLayer& l) {
  return {Matrix::Zero(l.weight.rows(), l.weight.cols()), Vector::Zero(l.bias.size())};
}

void check_dim(const Vector& v, Index expected, const char* what) {
  if (v.size() != expected) {
    throw DimensionError(std::string("condition encoder: ") + what + " has length " +
                         std::to_string(v.size()) + ", expected " + std::to_string(expected));
  }
}

void push_layer(std::vector<ParamSpan>& out, DenseLayer& l, const std::string& name) {
  out.push_back({name + ".w", {l.weight.data(), static_cast<std::size_t>(l.weight.size())}});
  out.push_back({name + ".b", {l.bias.data(), static_cast<std::size_t>(l.bias.size())}});
}

Matrix from_row_major(const double* data, Index rows, Index cols) {
  return Eigen::Map<const RowMajorMat<double>>(data, rows, cols);
}

}  // namespace

ConditionEncoders ConditionEncoders::init(Index layer_in, Index layer_out, Index output_dim,
                                          Index dim, RngStream& rng) {
  ConditionEncoders e;
  e.dim = dim;
  e.e_in = affine_init(layer_in, dim, rng);
  e.e_act = affine_init(layer_out, dim, rng);
  e.e_out = affine_init(output_dim, dim, rng);
  e.g_in = zeros_like(e.e_in);
  e.g_act = zeros_like(e.e_act);
  e.g_out = zeros_like(e.e_out);
  return e;
}

Vector ConditionEncoders::data_part(const ConditioningTuple& c) const {
  check_dim(c.layer_input, e_in.in_size(), "layer input");
  check_dim(c.activation, e_act.in_size(), "activation");
  check_dim(c.output, e_out.in_size(), "output");
  return e_in.weight * c.layer_input + e_in.bias + e_act.weight * c.activation + e_act.bias +
         e_out.weight * c.output + e_out.bias;
}

Vector ConditionEncoders::encode(const ConditioningTuple& c, int t) const {
  return pos_encode(t, dim) + data_part(c);
}

void ConditionEncoders::backward(const ConditioningTuple& c, const Vector& grad) {
  g_in.weight.noalias() += grad * c.layer_input.transpose();
  g_in.bias += grad;
  g_act.weight.noalias() += grad * c.activation.transpose();
  g_act.bias += grad;
  g_out.weight.noalias() += grad * c.output.transpose();
  g_out.bias += grad;
}

void ConditionEncoders::zero_grad() {
  g_in = zeros_like(e_in);
  g_act = zeros_like(e_act);
  g_out = zeros_like(e_out);
}

std::vector<ParamSpan> ConditionEncoders::parameters(const std::string& prefix) {
  std::vector<ParamSpan> p;
  push_layer(p, e_in, prefix + "in");
  push_layer(p, e_act, prefix + "act");
  push_layer(p, e_out, prefix + "out");
  return p;
}

std::vector<ParamSpan> ConditionEncoders::gradients(const std::string& prefix) {
  std::vector<ParamSpan> g;
  push_layer(g, g_in, prefix + "in");
  push_layer(g, g_act, prefix + "act");
  push_layer(g, g_out, prefix + "out");
  return g;
}

Index padded_side(Index rows, Index cols, int levels) {
  const Index unit = Index{1} << levels;
  const Index m = std::max(rows, cols);
  return ((m + unit - 1) / unit) * unit;
}

Matrix pad_square(const Matrix& m, Index side) {
  if (m.rows() > side || m.cols() > side) throw DimensionError("pad_square: matrix larger than side");
  Matrix out = Matrix::Zero(side, side);
  out.topLeftCorner(m.rows(), m.cols()) = m;
  return out;
}

Matrix crop(const Matrix& m, Index rows, Index cols) {
  if (rows > m.rows() || cols > m.cols()) throw DimensionError("crop: target larger than input");
  return m.topLeftCorner(rows, cols);
}

std::vector<ParamSpan> DiffusionBundle::parameters() {
  auto p = encoders.parameters();
  for (auto& s : unet.parameters()) p.push_back(s);
  return p;
}

std::vector<ParamSpan> DiffusionBundle::gradients() {
  auto g = encoders.gradients();
  for (auto& s : unet.gradients()) g.push_back(s);
  return g;
}

void DiffusionBundle::zero_grad() {
  encoders.zero_grad();
  unet.zero_grad();
}

DiffusionBundle make_bundle(const RecordManifest& manifest, const DiffusionConfig& cfg,
                            RngStream& init) {
  const Index rows = manifest.delta_rows(), cols = manifest.delta_cols();
  UNetConfig ucfg{padded_side(rows, cols, cfg.levels), cfg.channels, cfg.levels, cfg.attention,
                  cfg.cond_dim, cfg.spatial_hidden};
  RngStream enc_rng = init.substream(1), unet_rng = init.substream(2);
  return DiffusionBundle{
      build_schedule(cfg.T),
      ConditionEncoders::init(manifest.layer_in, manifest.layer_out, manifest.output_dim,
                              cfg.cond_dim, enc_rng),
      UNet(ucfg, unet_rng),
      manifest.layer,
      rows,
      cols,
      manifest.base_checksum,
      {}};
}

namespace {

struct Precond {
  double c_in, c_skip, c_out;
};

// Coefficients for y = x0 + noise of per-entry variance s2.
Precond precond(double s2, double sigma_data) {
  const double d2 = sigma_data * sigma_data;
  return {1.0 / std::sqrt(s2 + d2), d2 / (s2 + d2), std::sqrt(s2 * d2 / (s2 + d2))};
}

// Noise variance of y = omega / sqrt(abar): the schedule's value, raised to
// the level measured from y itself when that is larger. Clean maps have unit
// norm, so the excess energy per entry estimates the noise.
double noise_level(const NoiseSchedule& s, const Eigen::Ref<const Vector>& y, int t) {
  const double ab = s.alpha_bar[static_cast<std::size_t>(t)];
  const double scheduled = (1.0 - ab) / ab;
  const double measured = (y.squaredNorm() - 1.0) / static_cast<double>(y.size());
  return std::max(scheduled, measured);
}

// x0 = c_skip y + c_out F(c_in y, cond); fills c_out per column for the backward pass.
Matrix predict_x0(DiffusionBundle& bundle, const Matrix& omega, const Matrix& cond,
                  std::span<const int> t, Vector& c_out) {
  if (static_cast<Index>(t.size()) != omega.cols()) throw DimensionError("denoise_eps: one t per column");
  Matrix y(omega.rows(), omega.cols());
  Vector c_skip(omega.cols());
  c_out.resize(omega.cols());
  for (Index j = 0; j < omega.cols(); ++j) {
    const int tj = t[static_cast<std::size_t>(j)];
    y.col(j) = omega.col(j) / std::sqrt(bundle.schedule.alpha_bar[static_cast<std::size_t>(tj)]);
    const Precond p = precond(noise_level(bundle.schedule, y.col(j), tj), bundle.sigma_data());
    c_skip[j] = p.c_skip;
    c_out[j] = p.c_out;
    y.col(j) *= p.c_in;
  }
  Matrix x0 = bundle.unet.forward(y, cond);
  for (Index j = 0; j < omega.cols(); ++j) {
    const double ab = bundle.schedule.alpha_bar[static_cast<std::size_t>(t[static_cast<std::size_t>(j)])];
    x0.col(j) = c_out[j] * x0.col(j) + (c_skip[j] / std::sqrt(ab)) * omega.col(j);
  }
  return x0;
}

Matrix eps_from_x0(const NoiseSchedule& s, const Matrix& omega, const Matrix& x0,
                   std::span<const int> t) {
  Matrix eps(omega.rows(), omega.cols());
  for (Index j = 0; j < omega.cols(); ++j) {
    const double ab = s.alpha_bar[static_cast<std::size_t>(t[static_cast<std::size_t>(j)])];
    eps.col(j) = (omega.col(j) - std::sqrt(ab) * x0.col(j)) / std::sqrt(1.0 - ab);
  }
  return eps;
}

}  // namespace

Matrix denoise_eps(DiffusionBundle& bundle, const Matrix& omega, const Matrix& cond,
                   std::span<const int> t) {
  Vector c_out;
  const Matrix x0 = predict_x0(bundle, omega, cond, t, c_out);
  return eps_from_x0(bundle.schedule, omega, x0, t);
}

Vector flatten_map(const Matrix& m) {
  const RowMajorMat<double> rm = m;
  return Eigen::Map<const Vector>(rm.data(), rm.size());
}

Vector q_sample(const NoiseSchedule& s, const Vector& x0, int t, const Vector& eps) {
  if (t < 1 || t > s.T) throw std::out_of_range("q_sample: t out of range");
  const double ab = s.alpha_bar[static_cast<std::size_t>(t)];
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps;
}

double diffusion_objective(const NoiseSchedule& s, const Matrix& delta_padded, int t,
                           const Vector& eps,
                           const std::function<Vector(const Vector& omega_t, int t)>& eps_fn) {
  const Vector omega = q_sample(s, flatten_map(delta_padded), t, eps);
  return (eps - eps_fn(omega, t)).squaredNorm();
}

double diffusion_loss_grad(DiffusionBundle& bundle, std::span<const OverfitRecord* const> batch,
                           std::span<const int> t, const Matrix& eps) {
  if (batch.empty()) throw std::invalid_argument("diffusion step: empty batch");
  const auto& sched = bundle.schedule;
  const Index side = bundle.side(), n = side * side;
  const auto B = static_cast<Index>(batch.size());
  if (static_cast<Index>(t.size()) != B || eps.rows() != n || eps.cols() != B) {
    throw DimensionError("diffusion step: t and eps must match the batch");
  }

  Matrix omega(n, B), cond(bundle.encoders.dim, B);
  for (Index j = 0; j < B; ++j) {
    const OverfitRecord& r = *batch[static_cast<std::size_t>(j)];
    if (r.delta_norm.rows() != bundle.rows || r.delta_norm.cols() != bundle.cols) {
      throw DimensionError("diffusion step: record shape does not match the bundle");
    }
    const int tj = t[static_cast<std::size_t>(j)];
    omega.col(j) = q_sample(sched, flatten_map(pad_square(r.delta_norm, side)), tj, eps.col(j));
    cond.col(j) = bundle.encoders.encode(r.cond, tj);
  }

  bundle.zero_grad();
  Vector c_out;
  const Matrix x0 = predict_x0(bundle, omega, cond, t, c_out);
  const Matrix diff = eps_from_x0(sched, omega, x0, t) - eps;
  const double loss = diff.squaredNorm() / static_cast<double>(B);
  if (!std::isfinite(loss)) throw NumericalError("diffusion step: non-finite loss");

  Matrix dout = (2.0 / static_cast<double>(B)) * diff;
  for (Index j = 0; j < B; ++j) {
    const double ab = sched.alpha_bar[static_cast<std::size_t>(t[static_cast<std::size_t>(j)])];
    dout.col(j) *= -c_out[j] * std::sqrt(ab) / std::sqrt(1.0 - ab);
  }
  const Matrix dcond = bundle.unet.backward(dout);
  for (Index j = 0; j < B; ++j) bundle.encoders.backward(batch[static_cast<std::size_t>(j)]->cond, dcond.col(j));
  return loss;
}

double diffusion_train_step(DiffusionBundle& bundle, std::span<const OverfitRecord* const> batch,
                            RngStream& rng, double lr) {
  const Index n = bundle.side() * bundle.side();
  const auto B = static_cast<Index>(batch.size());
  std::vector<int> ts(batch.size());
  Matrix eps(n, B);
  for (Index j = 0; j < B; ++j) {
    ts[static_cast<std::size_t>(j)] =
        1 + static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(bundle.schedule.T)));
    eps.col(j) = rng.gaussian_vector(n);
  }
  const double loss = diffusion_loss_grad(bundle, batch, ts, eps);
  const auto params = bundle.parameters();
  const auto grads = bundle.gradients();
  adam_step(bundle.adam, params, grads, lr);
  return loss;
}

std::vector<double> train_diffusion(DiffusionBundle& bundle, const RecordStore& store,
                                    const DiffusionTrainOptions& opts, RngStream& rng) {
  if (store.records.empty()) throw std::invalid_argument("train_diffusion: empty record store");
  if (store.manifest.base_checksum != bundle.base_checksum) {
    throw std::invalid_argument("train_diffusion: records come from a different base model");
  }
  std::vector<const OverfitRecord*> order;
  for (const auto& r : store.records) order.push_back(&r);
  const auto bs = static_cast<std::size_t>(opts.batch_size);

  std::vector<double> history;
  double best = std::numeric_limits<double>::infinity();
  int stale = 0;
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.uniform_index(i)]);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t end = std::min(order.size(), start + bs);
      const std::span<const OverfitRecord* const> batch(order.data() + start, end - start);
      total += diffusion_train_step(bundle, batch, rng, opts.lr) * static_cast<double>(end - start);
    }
    const double mean = total / static_cast<double>(order.size());
    history.push_back(mean);
    if (mean < best * (1.0 - opts.min_delta)) {
      best = mean;
      stale = 0;
    } else if (++stale >= opts.patience) {
      break;
    }
  }
  return history;
}

Matrix ancestral_sample(const NoiseSchedule& s, Matrix omega, const EpsFn& eps,
                        std::span<RngStream> rngs, bool deterministic_z) {
  if (!deterministic_z && static_cast<Index>(rngs.size()) != omega.cols()) {
    throw DimensionError("ancestral_sample: one rng stream per column");
  }
  for (int t = s.T; t >= 1; --t) {
    const auto i = static_cast<std::size_t>(t);
    const Matrix e = eps(omega, t);
    omega = (omega - (s.beta[i] / std::sqrt(1.0 - s.alpha_bar[i])) * e) / std::sqrt(s.alpha[i]);
    if (t > 1 && !deterministic_z) {
      const double sd = std::sqrt(s.beta_tilde[i]);
      for (Index j = 0; j < omega.cols(); ++j) {
        omega.col(j) += sd * rngs[static_cast<std::size_t>(j)].gaussian_vector(omega.rows());
      }
    }
  }
  return omega;
}

std::vector<Matrix> sample_delta(DiffusionBundle& bundle, const std::vector<ConditioningTuple>& conds,
                                 std::span<RngStream> rngs, bool deterministic_z) {
  const auto B = static_cast<Index>(conds.size());
  if (static_cast<Index>(rngs.size()) != B) throw DimensionError("sample_delta: one rng stream per tuple");
  const Index side = bundle.side(), n = side * side;
  Matrix data(bundle.encoders.dim, B);
  Matrix omega_T(n, B);
  for (Index j = 0; j < B; ++j) {
    data.col(j) = bundle.encoders.data_part(conds[static_cast<std::size_t>(j)]);
    omega_T.col(j) = rngs[static_cast<std::size_t>(j)].gaussian_vector(n);
  }
  const EpsFn fn = [&](const Matrix& omega, int t) {
    Matrix cond = data;
    cond.colwise() += pos_encode(t, bundle.encoders.dim);
    const std::vector<int> ts(static_cast<std::size_t>(B), t);
    return denoise_eps(bundle, omega, cond, ts);
  };
  const Matrix omega0 = ancestral_sample(bundle.schedule, omega_T, fn, rngs, deterministic_z);
  std::vector<Matrix> out;
  for (Index j = 0; j < B; ++j) {
    out.push_back(crop(from_row_major(omega0.col(j).data(), side, side), bundle.rows, bundle.cols));
  }
  return out;
}

MlpModel apply_weights(const MlpModel& model, Index layer, const Matrix& omega, double rho) {
  model.check_layer_index(layer);
  MlpModel out = model;
  auto& l = out.layers[static_cast<std::size_t>(layer)];
  if (omega.rows() != l.out_size() || omega.cols() != l.in_size() + 1) {
    throw DimensionError("apply_weights: delta shape does not match layer " + std::to_string(layer));
  }
  l.set_augmented(l.augmented() + rho * omega);
  return out;
}

namespace {

TensorF flat_tensor(std::span<const double> v) {
  Vector data = Eigen::Map<const Vector>(v.data(), static_cast<Index>(v.size()));
  return TensorF({static_cast<Index>(v.size())}, std::move(data));
}

TensorF flat_tensor(const Vector& v) { return TensorF({v.size()}, v); }

void copy_into(std::span<double> dst, const TensorF& src, const std::string& name) {
  if (src.size() != static_cast<Index>(dst.size())) {
    throw FormatError("bundle tensor " + name + " has the wrong size");
  }
  std::copy(src.data().data(), src.data().data() + src.size(), dst.begin());
}

}  // namespace

void save_bundle(const fs::path& dir, DiffusionBundle& bundle) {
  Checkpoint ck;
  const auto& u = bundle.unet.config();
  const auto& s = bundle.schedule;
  ck.meta = {{"format", "ocd-bundle/1"},
             {"T", s.T},
             {"beta", s.beta},
             {"alpha_bar", s.alpha_bar},
             {"beta_tilde", s.beta_tilde},
             {"cond_dim", u.cond_dim},
             {"channels", u.channels},
             {"levels", u.levels},
             {"attention", u.attention},
             {"spatial_hidden", u.spatial_hidden},
             {"side", u.side},
             {"layer", bundle.layer},
             {"rows", bundle.rows},
             {"cols", bundle.cols},
             {"layer_in", bundle.encoders.e_in.in_size()},
             {"layer_out", bundle.encoders.e_act.in_size()},
             {"output_dim", bundle.encoders.e_out.in_size()},
             {"base_checksum", bundle.base_checksum},
             {"adam_step", bundle.adam.step}};
  const auto params = bundle.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    ck.tensors.emplace(params[i].name, flat_tensor(params[i].values));
    if (i < bundle.adam.first_moment.size()) {
      ck.tensors.emplace("adam_m." + params[i].name, flat_tensor(bundle.adam.first_moment[i]));
      ck.tensors.emplace("adam_v." + params[i].name, flat_tensor(bundle.adam.second_moment[i]));
    }
  }
  save_checkpoint(dir, ck);
}

DiffusionBundle load_bundle(const fs::path& dir, const std::string& base_checksum) {
  const Checkpoint ck = load_checkpoint(dir);
  const auto& m = ck.meta;
  if (m.value("format", "") != "ocd-bundle/1") throw FormatError("not a diffusion bundle: " + dir.string());
  if (m.at("base_checksum").get<std::string>() != base_checksum) {
    throw FormatError("bundle in " + dir.string() + " was trained against base model " +
                      m.at("base_checksum").get<std::string>() + ", not " + base_checksum);
  }
  RecordManifest man;
  man.layer = m.at("layer").get<Index>();
  man.layer_in = m.at("layer_in").get<Index>();
  man.layer_out = m.at("layer_out").get<Index>();
  man.output_dim = m.at("output_dim").get<Index>();
  man.base_checksum = base_checksum;
  const DiffusionConfig cfg{m.at("T").get<int>(), m.at("cond_dim").get<Index>(),
                            m.at("channels").get<Index>(), m.at("levels").get<int>(),
                            m.at("attention").get<bool>(), m.at("spatial_hidden").get<Index>()};
  RngStream unused(0, 0);
  DiffusionBundle b = make_bundle(man, cfg, unused);
  if (b.rows != m.at("rows").get<Index>() || b.cols != m.at("cols").get<Index>() ||
      b.side() != m.at("side").get<Index>()) {
    throw FormatError("bundle geometry in " + dir.string() + " is inconsistent");
  }
  const auto params = b.parameters();
  for (const auto& p : params) copy_into(p.values, ck.tensor(p.name), p.name);
  b.adam.step = m.at("adam_step").get<std::int64_t>();
  if (ck.tensors.count("adam_m." + params.front().name)) {
    for (const auto& p : params) {
      b.adam.first_moment.push_back(ck.tensor("adam_m." + p.name).data());
      b.adam.second_moment.push_back(ck.tensor("adam_v." + p.name).data());
    }
  }
  return b;
}

}  // namespace ocd
