#include "ocd/layer_select.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cstdio>
#include <limits>
#include <numbers>
#include <sstream>

#include "ocd/loss.hpp"

namespace ocd {

namespace {

double quantile_sorted(std::span<const double> s, double q) {
  const double pos = q * static_cast<double>(s.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, s.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return s[lo] + frac * (s[hi] - s[lo]);
}

constexpr int kBinsPerBandwidth = 32;
constexpr int kKernelReach = 8;  // in bandwidths
constexpr int kWindow = kBinsPerBandwidth * kKernelReach;

}  // namespace

double silverman_bandwidth(std::span<const double> sorted) {
  const auto m = static_cast<double>(sorted.size());
  double mean = 0.0;
  for (double v : sorted) mean += v;
  mean /= m;
  double ss = 0.0;
  for (double v : sorted) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / (m - 1.0));
  const double iqr = quantile_sorted(sorted, 0.75) - quantile_sorted(sorted, 0.25);
  const double spread = iqr > 0.0 ? std::min(sd, iqr / 1.34) : sd;
  return 0.9 * spread * std::pow(m, -0.2);
}

double kde_entropy(std::span<const double> samples) {
  if (samples.size() < 2) {
    throw std::invalid_argument("kde_entropy needs at least two samples");
  }
  std::vector<double> x(samples.begin(), samples.end());
  for (double v : x) {
    if (!std::isfinite(v)) throw NumericalError("kde_entropy: non-finite sample");
  }
  std::sort(x.begin(), x.end());
  if (x.front() == x.back()) {
    throw DegenerateDistribution("kde_entropy: all samples are identical");
  }
  const double h = silverman_bandwidth(x);
  if (!(h > 0.0)) throw DegenerateDistribution("kde_entropy: zero bandwidth");
  const double delta = h / kBinsPerBandwidth;
  const auto m = x.size();

  // Linear binning onto a grid anchored at the smallest sample.
  std::vector<std::int64_t> bin(m);
  std::vector<double> frac(m);
  std::vector<std::pair<std::int64_t, double>> mass;
  mass.reserve(2 * m);
  for (std::size_t i = 0; i < m; ++i) {
    const double pos = (x[i] - x.front()) / delta;
    const double k = std::floor(pos);
    bin[i] = static_cast<std::int64_t>(k);
    frac[i] = pos - k;
    mass.emplace_back(bin[i], 1.0 - frac[i]);
    mass.emplace_back(bin[i] + 1, frac[i]);
  }
  std::stable_sort(mass.begin(), mass.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<std::int64_t> grid;
  std::vector<double> weight;
  for (const auto& [k, w] : mass) {
    if (!grid.empty() && grid.back() == k) {
      weight.back() += w;
    } else {
      grid.push_back(k);
      weight.push_back(w);
    }
  }

  std::array<double, kWindow + 1> kernel{};
  for (int d = 0; d <= kWindow; ++d) {
    const double u = static_cast<double>(d) / kBinsPerBandwidth;
    kernel[static_cast<std::size_t>(d)] = std::exp(-0.5 * u * u);
  }

  // Density on every occupied grid node, summing nodes within the window.
  const double norm = 1.0 / (static_cast<double>(m) * h * std::sqrt(2.0 * std::numbers::pi));
  std::vector<double> density(grid.size());
  std::size_t lo = 0;
  for (std::size_t g = 0; g < grid.size(); ++g) {
    while (grid[lo] < grid[g] - kWindow) ++lo;
    double acc = 0.0;
    for (std::size_t j = lo; j < grid.size() && grid[j] <= grid[g] + kWindow; ++j) {
      acc += weight[j] * kernel[static_cast<std::size_t>(std::abs(grid[j] - grid[g]))];
    }
    density[g] = acc * norm;
  }

  double neg_log = 0.0;
  std::size_t g = 0;
  for (std::size_t i = 0; i < m; ++i) {
    while (grid[g] < bin[i]) ++g;
    const double p = (1.0 - frac[i]) * density[g] + frac[i] * density[g + 1];
    neg_log -= std::log(p);
  }
  return neg_log / static_cast<double>(m);
}

double perturbation_sigma(const MlpModel& model, Index layer, double relative) {
  model.check_layer_index(layer);
  const auto& l = model.layers[static_cast<std::size_t>(layer)];
  const double count = static_cast<double>(l.weight.size() + l.bias.size());
  const double rms = std::sqrt((l.weight.squaredNorm() + l.bias.squaredNorm()) / count);
  return relative * rms;
}

MlpModel perturb_layer(const MlpModel& model, Index layer, double sigma, RngStream& rng) {
  model.check_layer_index(layer);
  if (!(sigma > 0.0)) throw std::invalid_argument("perturb_layer: sigma must be positive");
  MlpModel out = model;
  auto& l = out.layers[static_cast<std::size_t>(layer)];
  l.weight += sigma * rng.gaussian_matrix(l.weight.rows(), l.weight.cols());
  l.bias += sigma * rng.gaussian_vector(l.bias.size());
  return out;
}

std::vector<double> loss_samples(const MlpModel& model, const Vector& x,
                                 const Target& target, Index layer, int draws,
                                 double sigma, RngStream& rng) {
  model.check_layer_index(layer);
  if (draws < 2) throw std::invalid_argument("loss_samples needs at least two draws");
  if (!(sigma > 0.0)) throw std::invalid_argument("loss_samples: sigma must be positive");
  const auto base = mlp_forward(model, x);
  const Vector& h = base.inputs[static_cast<std::size_t>(layer)];
  const auto& l = model.layers[static_cast<std::size_t>(layer)];
  const Index last = model.num_layers() - 1;
  const LossKind kind = loss_kind_for(model.spec.output_head);

  std::vector<double> losses;
  losses.reserve(static_cast<std::size_t>(draws));
  Vector z(l.out_size());
  for (int k = 0; k < draws; ++k) {
    // (W + sigma E) h + (b + sigma e), noise drawn in row-major order
    for (Index r = 0; r < l.out_size(); ++r) {
      double noise = 0.0;
      for (Index c = 0; c < l.in_size(); ++c) noise += rng.gaussian() * h[c];
      z[r] = noise;
    }
    for (Index r = 0; r < l.out_size(); ++r) z[r] += rng.gaussian();
    z = l.weight * h + l.bias + sigma * z;
    double loss;
    if (layer == last) {
      loss = loss_eval(kind, z, target).loss;
    } else {
      const Vector a = z.unaryExpr(
          [act = model.spec.hidden_activation](double v) { return activate(act, v); });
      loss = loss_eval(kind, mlp_forward_from(model, layer + 1, a).logits(), target).loss;
    }
    if (!std::isfinite(loss)) throw NumericalError("loss_samples: non-finite loss");
    losses.push_back(loss);
  }
  return losses;
}

double layer_score(const MlpModel& model, const Dataset& subset, Index layer,
                   int draws, double sigma, const RngStream& rng) {
  if (subset.size() == 0) throw std::invalid_argument("layer_score: empty subset");
  double total = 0.0;
  for (Index i = 0; i < subset.size(); ++i) {
    RngStream stream = rng.substream(static_cast<std::uint64_t>(i));
    const auto losses = loss_samples(model, subset.input(i), subset.target(i), layer,
                                     draws, sigma, stream);
    try {
      total += kde_entropy(losses);
    } catch (const DegenerateDistribution&) {
      total = -std::numeric_limits<double>::infinity();
    }
  }
  return total / static_cast<double>(subset.size());
}

bool operator==(const LayerScore& a, const LayerScore& b) {
  return a.layer == b.layer && a.score == b.score && a.sigma == b.sigma;
}

std::vector<Index> rank_layers(const std::vector<LayerScore>& scores) {
  std::vector<Index> order;
  for (const auto& s : scores) order.push_back(s.layer);
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
    const double sa = scores[static_cast<std::size_t>(a)].score;
    const double sb = scores[static_cast<std::size_t>(b)].score;
    return sa > sb || (sa == sb && a < b);
  });
  return order;
}

LayerScoreReport select_layer(const MlpModel& model, const Dataset& subset,
                              const LayerSelectOptions& opts) {
  LayerScoreReport report;
  report.num_samples = subset.size();
  report.draws = opts.draws;
  const RngStream root(opts.seed, 0x1A7E5);
  for (Index l = 0; l < model.num_layers(); ++l) {
    const double sigma = perturbation_sigma(model, l, opts.relative_sigma);
    const double score = layer_score(model, subset, l, opts.draws, sigma,
                                     root.substream(static_cast<std::uint64_t>(l)));
    report.layers.push_back({l, score, sigma});
  }
  report.ranking = rank_layers(report.layers);
  report.selected = report.ranking.front();
  if (report.ranking.size() > 1) report.runner_up = report.ranking[1];
  return report;
}

namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_double(const std::string& s) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw FormatError("layer report: bad number '" + s + "'");
  }
  return v;
}

}  // namespace

std::string LayerScoreReport::to_text() const {
  std::ostringstream out;
  out << "layer  score(nats)      sigma            samples  draws  rank\n";
  for (const auto& s : layers) {
    const auto rank = std::find(ranking.begin(), ranking.end(), s.layer) - ranking.begin();
    char line[160];
    std::snprintf(line, sizeof line, "%5lld  %-15.6f  %-15.6g  %7lld  %5d  %4lld%s\n",
                  static_cast<long long>(s.layer), s.score, s.sigma,
                  static_cast<long long>(num_samples), draws,
                  static_cast<long long>(rank + 1),
                  s.layer == selected ? "  <- selected"
                  : (runner_up && s.layer == *runner_up) ? "  <- runner-up"
                                                         : "");
    out << line;
  }
  out << "bandwidth: " << bandwidth_rule << '\n';
  return out.str();
}

std::string LayerScoreReport::to_csv() const {
  std::ostringstream out;
  out << "layer,score,sigma,samples,draws,rank\n";
  for (const auto& s : layers) {
    const auto rank = std::find(ranking.begin(), ranking.end(), s.layer) - ranking.begin();
    out << s.layer << ',' << fmt_double(s.score) << ',' << fmt_double(s.sigma) << ','
        << num_samples << ',' << draws << ',' << rank + 1 << '\n';
  }
  return out.str();
}

LayerScoreReport LayerScoreReport::from_csv(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  if (line != "layer,score,sigma,samples,draws,rank") {
    throw FormatError("layer report: unexpected header '" + line + "'");
  }
  LayerScoreReport r;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 6) throw FormatError("layer report: malformed row '" + line + "'");
    const auto layer = static_cast<Index>(parse_double(f[0]));
    if (layer != static_cast<Index>(r.layers.size())) {
      throw FormatError("layer report: rows out of order");
    }
    r.layers.push_back({layer, parse_double(f[1]), parse_double(f[2])});
    r.num_samples = static_cast<Index>(parse_double(f[3]));
    r.draws = static_cast<int>(parse_double(f[4]));
  }
  if (r.layers.empty()) throw FormatError("layer report: no rows");
  r.ranking = rank_layers(r.layers);
  r.selected = r.ranking.front();
  if (r.ranking.size() > 1) r.runner_up = r.ranking[1];
  return r;
}

}  // namespace ocd
