#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ocd/adam.hpp"
#include "ocd/overfit.hpp"
#include "ocd/rng.hpp"
#include "ocd/unet.hpp"

namespace ocd {

/// Linear beta schedule indexed by t = 0..T; entry 0 holds alpha_bar = 1
/// and zero betas.
struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;
  std::vector<double> beta_tilde;  // posterior variance
};

/// beta_t = (1e-4 (T - t) + 1e-2 (t - 1)) / (T - 1). Throws for T < 2.
NoiseSchedule build_schedule(int T);

/// Interleaved sinusoid: (sin(t/10000^(0/d)), cos(...), sin(t/10000^(2/d)), ...).
/// Throws for odd d.
Vector pos_encode(double t, Index d);

/// One affine map per conditioning component into a shared d-dim space.
struct ConditionEncoders {
  Index dim = 0;
  DenseLayer e_in, e_act, e_out;
  DenseLayer g_in, g_act, g_out;  // gradient accumulators

  static ConditionEncoders init(Index layer_in, Index layer_out, Index output_dim, Index dim,
                                RngStream& rng);

  /// E_i(i) + E_a(a) + E_o(out); independent of t, so computed once per sample.
  Vector data_part(const ConditioningTuple& c) const;
  /// PE(t) + data_part(c).
  Vector encode(const ConditioningTuple& c, int t) const;
  /// Accumulates gradients given d loss / d e.
  void backward(const ConditioningTuple& c, const Vector& grad);
  void zero_grad();

  std::vector<ParamSpan> parameters(const std::string& prefix = "enc.");
  std::vector<ParamSpan> gradients(const std::string& prefix = "enc.");
};

/// Smallest multiple of 2^levels that is >= max(rows, cols).
Index padded_side(Index rows, Index cols, int levels);
Matrix pad_square(const Matrix& m, Index side);
Matrix crop(const Matrix& m, Index rows, Index cols);

struct DiffusionConfig {
  int T = 10;
  Index cond_dim = 32;
  Index channels = 8;
  int levels = 2;
  bool attention = true;
  Index spatial_hidden = 64;
};

struct DiffusionBundle {
  NoiseSchedule schedule;
  ConditionEncoders encoders;
  UNet unet;
  Index layer = 0;
  Index rows = 0;  // selected layer [W | b] shape
  Index cols = 0;
  std::string base_checksum;
  AdamState adam;

  Index side() const { return unet.config().side; }
  /// Per-entry scale of a unit-norm delta: 1 / sqrt(rows * cols).
  double sigma_data() const { return 1.0 / std::sqrt(static_cast<double>(rows * cols)); }

  std::vector<ParamSpan> parameters();
  std::vector<ParamSpan> gradients();
  void zero_grad();
};

/// Fresh bundle whose geometry matches the record store.
DiffusionBundle make_bundle(const RecordManifest& manifest, const DiffusionConfig& cfg,
                            RngStream& init);

/// Noise estimate for a batch. Columns of `omega` are padded row-major maps,
/// columns of `cond` the matching encodings, `t` the step of each column.
///
/// The clean map is predicted as x0 = c_skip y + c_out F(c_in y, e) with
/// y = omega / sqrt(abar_t), F the U-Net, and coefficients set from the noise
/// level of y and sigma_data() so that F's input and target have unit scale.
/// The estimate is eps = (omega - sqrt(abar_t) x0) / sqrt(1 - abar_t).
Matrix denoise_eps(DiffusionBundle& bundle, const Matrix& omega, const Matrix& cond,
                   std::span<const int> t);

/// omega_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
Vector q_sample(const NoiseSchedule& s, const Vector& x0, int t, const Vector& eps);

/// Row-major flattening of a padded map, the column layout used by the denoiser.
Vector flatten_map(const Matrix& m);

/// Squared-L2 noise-matching loss of one record at step t with noise eps
/// (padded map), using `eps_fn` as the denoiser. For tests and diagnostics.
double diffusion_objective(const NoiseSchedule& s, const Matrix& delta_padded, int t,
                           const Vector& eps,
                           const std::function<Vector(const Vector& omega_t, int t)>& eps_fn);

/// Mean noise-matching loss of a minibatch at the given steps and noise
/// (columns are padded row-major maps). Resets and then fills the bundle's
/// gradients.
double diffusion_loss_grad(DiffusionBundle& bundle, std::span<const OverfitRecord* const> batch,
                           std::span<const int> t, const Matrix& eps);

/// One Adam step on a minibatch; returns the mean pre-step loss. Each record
/// gets t ~ U{1..T} and fresh noise from `rng`.
double diffusion_train_step(DiffusionBundle& bundle, std::span<const OverfitRecord* const> batch,
                            RngStream& rng, double lr);

struct DiffusionTrainOptions {
  int epochs = 25;
  int batch_size = 32;
  double lr = 1e-3;
  // Stop after `patience` epochs without a relative improvement of `min_delta`.
  int patience = 5;
  double min_delta = 1e-3;
};

/// Full passes over the store in shuffled order. Returns the mean loss of
/// each epoch.
std::vector<double> train_diffusion(DiffusionBundle& bundle, const RecordStore& store,
                                    const DiffusionTrainOptions& opts, RngStream& rng);

/// Maps (omega_t batch, t) to a noise estimate of the same shape.
using EpsFn = std::function<Matrix(const Matrix& omega, int t)>;

/// Ancestral sampling from omega_T down to omega_0:
///   omega_{t-1} = (omega_t - beta_t / sqrt(1 - abar_t) eps) / sqrt(alpha_t)
///                 + [t > 1] sqrt(beta_tilde_t) z.
/// Column j draws its z from rngs[j]; z is zero when deterministic_z is set.
Matrix ancestral_sample(const NoiseSchedule& s, Matrix omega_T, const EpsFn& eps,
                        std::span<RngStream> rngs, bool deterministic_z);

/// Draws one delta direction per conditioning tuple, cropped to the layer
/// shape. Column j takes omega_T and every z from rngs[j].
std::vector<Matrix> sample_delta(DiffusionBundle& bundle,
                                 const std::vector<ConditioningTuple>& conds,
                                 std::span<RngStream> rngs, bool deterministic_z = false);

/// Copy of `model` with [W | b] of `layer` shifted by rho * omega.
MlpModel apply_weights(const MlpModel& model, Index layer, const Matrix& omega, double rho);

void save_bundle(const std::filesystem::path& dir, DiffusionBundle& bundle);
/// Refuses (FormatError) to load a bundle trained against a different base model.
DiffusionBundle load_bundle(const std::filesystem::path& dir, const std::string& base_checksum);

}  // namespace ocd
