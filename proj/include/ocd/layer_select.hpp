#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ocd/datasets.hpp"
#include "ocd/mlp.hpp"
#include "ocd/rng.hpp"

namespace ocd {

/// Bandwidth used by kde_entropy:
///   h = 0.9 * min(std, IQR / 1.34) * m^(-1/5)
/// (Silverman's rule of thumb; falls back to std when the IQR is zero).
double silverman_bandwidth(std::span<const double> sorted_samples);

/// Resubstitution entropy estimate, in nats, of a Gaussian KDE fitted to
/// `samples`: H = -(1/m) sum_i log p(x_i).
///
/// Densities are evaluated on a linearly binned grid with spacing h/32 and
/// a kernel truncated at 8h. Samples are sorted first, so the result does
/// not depend on input order. Throws DegenerateDistribution when all
/// samples are equal.
double kde_entropy(std::span<const double> samples);

/// Copy of `model` with layer L (weights and bias) shifted by i.i.d.
/// N(0, sigma^2) noise.
MlpModel perturb_layer(const MlpModel& model, Index layer, double sigma, RngStream& rng);

/// sigma_L = relative * RMS of layer L's weights and bias taken together.
double perturbation_sigma(const MlpModel& model, Index layer, double relative);

/// m losses of (x, target), each under a fresh perturbation of layer L.
std::vector<double> loss_samples(const MlpModel& model, const Vector& x,
                                 const Target& target, Index layer, int draws,
                                 double sigma, RngStream& rng);

/// Mean per-sample entropy over `subset`. A degenerate sample contributes
/// -infinity. Sample i draws from rng.substream(i).
double layer_score(const MlpModel& model, const Dataset& subset, Index layer,
                   int draws, double sigma, const RngStream& rng);

struct LayerScore {
  Index layer = 0;
  double score = 0.0;  // mean entropy, nats
  double sigma = 0.0;
};

struct LayerScoreReport {
  std::vector<LayerScore> layers;  // by layer index
  Index num_samples = 0;
  int draws = 0;
  std::vector<Index> ranking;      // best first
  Index selected = 0;
  std::optional<Index> runner_up;
  std::string bandwidth_rule = "silverman: 0.9*min(std, IQR/1.34)*m^(-1/5)";

  std::string to_text() const;
  std::string to_csv() const;
  static LayerScoreReport from_csv(const std::string& csv);

  friend bool operator==(const LayerScoreReport&, const LayerScoreReport&) = default;
};

bool operator==(const LayerScore& a, const LayerScore& b);

/// Ranks layers by descending score (ties: lower index first).
std::vector<Index> rank_layers(const std::vector<LayerScore>& scores);

struct LayerSelectOptions {
  int draws = 10000;
  double relative_sigma = 0.1;
  std::uint64_t seed = 0;
};

/// Scores every layer of `model` on `subset` and picks the one whose
/// perturbed-loss distribution has the highest mean entropy.
LayerScoreReport select_layer(const MlpModel& model, const Dataset& subset,
                              const LayerSelectOptions& opts);

}  // namespace ocd
