#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <numbers>

#include "ocd/layer_select.hpp"
#include "ocd/loss.hpp"
#include "ocd/train.hpp"

using namespace ocd;

namespace {

// O(m^2) plug-in entropy with the same bandwidth rule; no binning.
double exact_kde_entropy(std::vector<double> x) {
  std::sort(x.begin(), x.end());
  const double h = silverman_bandwidth(x);
  const double m = static_cast<double>(x.size());
  const double norm = 1.0 / (m * h * std::sqrt(2.0 * std::numbers::pi));
  double acc = 0.0;
  for (double xi : x) {
    double p = 0.0;
    for (double xj : x) {
      const double u = (xi - xj) / h;
      p += std::exp(-0.5 * u * u);
    }
    acc -= std::log(p * norm);
  }
  return acc / m;
}

std::vector<double> normal_draws(std::size_t n, std::uint64_t seed) {
  RngStream rng(seed, 0);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.gaussian();
  return v;
}

std::vector<double> uniform_draws(std::size_t n, std::uint64_t seed) {
  RngStream rng(seed, 0);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform();
  return v;
}

MlpModel blob_model(std::uint64_t seed, const Dataset& train) {
  RngStream rng(seed, 1);
  MlpModel m = init_mlp({{2, 16, 16, 4}, Activation::Tanh, OutputHead::SoftmaxClassifier}, rng);
  train_mlp(m, train, {10, 32, 1e-3}, rng);
  return m;
}

}  // namespace

TEST_CASE("kde_entropy: Gaussian and uniform oracles") {
  const double gauss = 0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e);
  const auto n = normal_draws(10000, 1);
  const double hn = kde_entropy(n);
  MESSAGE("normal: " << hn << " vs " << gauss);
  CHECK(std::abs(hn - gauss) < 0.05);
  CHECK(std::abs(gauss - 1.4189) < 1e-4);

  const auto u = uniform_draws(10000, 2);
  const double hu = kde_entropy(u);
  MESSAGE("uniform: " << hu);
  CHECK(std::abs(hu) < 0.05);
}

TEST_CASE("kde_entropy: binned estimate agrees with the exact O(m^2) sum") {
  for (std::uint64_t seed : {3, 4}) {
    auto x = normal_draws(3000, seed);
    for (std::size_t i = 0; i < x.size(); i += 3) x[i] = std::exp(x[i]);  // skewed mixture
    CHECK(std::abs(kde_entropy(x) - exact_kde_entropy(x)) < 1e-3);
  }
  const auto u = uniform_draws(2000, 5);
  CHECK(std::abs(kde_entropy(u) - exact_kde_entropy(u)) < 1e-3);
}

TEST_CASE("kde_entropy: translation, scaling and permutation") {
  auto x = normal_draws(5000, 7);
  const double h0 = kde_entropy(x);
  auto shifted = x;
  for (auto& v : shifted) v += 3.25;
  CHECK(std::abs(kde_entropy(shifted) - h0) < 1e-9);
  for (double c : {0.01, 2.0, 1e3}) {
    auto scaled = x;
    for (auto& v : scaled) v *= c;
    CHECK(std::abs(kde_entropy(scaled) - (h0 + std::log(c))) < 1e-9);
  }
  auto perm = x;
  RngStream rng(1, 1);
  for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.uniform_index(i)]);
  CHECK(kde_entropy(perm) == h0);
}

TEST_CASE("kde_entropy: degenerate and tiny inputs") {
  const std::vector<double> same(100, 0.7);
  CHECK_THROWS_AS(kde_entropy(same), DegenerateDistribution);
  CHECK_THROWS(kde_entropy(std::vector<double>{1.0}));
  // two distinct points: finite
  CHECK(std::isfinite(kde_entropy(std::vector<double>{0.0, 1.0})));
  // zero IQR but non-zero spread falls back to the std
  std::vector<double> spiky(100, 0.0);
  spiky[0] = 5.0;
  CHECK(std::isfinite(kde_entropy(spiky)));
}

TEST_CASE("perturb_layer: touches one layer with the requested spread") {
  RngStream init(1, 0);
  MlpModel m = init_mlp({{3, 8, 4}, Activation::Tanh, OutputHead::SoftmaxClassifier}, init);
  RngStream rng(2, 0);
  const double sigma = 0.05;
  double ss = 0.0;
  Index count = 0;
  for (int k = 0; k < 3200; ++k) {  // 3200 * 36 > 1e5 coordinate draws
    const MlpModel p = perturb_layer(m, 1, sigma, rng);
    CHECK(p.layers[0] == m.layers[0]);
    ss += (p.layers[1].weight - m.layers[1].weight).squaredNorm() +
          (p.layers[1].bias - m.layers[1].bias).squaredNorm();
    count += p.layers[1].weight.size() + p.layers[1].bias.size();
  }
  const double sd = std::sqrt(ss / static_cast<double>(count));
  CHECK(std::abs(sd - sigma) / sigma < 0.01);

  RngStream r2(3, 0);
  const MlpModel tiny = perturb_layer(m, 0, 1e-15, r2);
  const Vector x = Vector::Ones(3);
  CHECK((mlp_forward(tiny, x).output - mlp_forward(m, x).output).norm() < 1e-12);
  CHECK_THROWS_AS(perturb_layer(m, 2, 0.1, r2), std::out_of_range);
}

TEST_CASE("loss_samples: consistent with perturb_layer and continuous in sigma") {
  RngStream init(4, 0);
  MlpModel m = init_mlp({{2, 6, 6, 3}, Activation::Tanh, OutputHead::SoftmaxClassifier}, init);
  Vector x(2);
  x << 0.3, -1.2;
  const Target t = Target::classification(2);

  for (Index layer = 0; layer < 3; ++layer) {
    RngStream a(9, static_cast<std::uint64_t>(layer)), b = a;
    const auto fast = loss_samples(m, x, t, layer, 5, 0.2, a);
    for (double v : fast) {
      const MlpModel p = perturb_layer(m, layer, 0.2, b);
      CHECK(std::abs(v - trace_loss(p, mlp_forward(p, x), t).loss) < 1e-12);
    }
  }

  RngStream s1(5, 5), s2(5, 5);
  CHECK(loss_samples(m, x, t, 1, 2, 0.1, s1) == loss_samples(m, x, t, 1, 2, 0.1, s2));

  const double base = trace_loss(m, mlp_forward(m, x), t).loss;
  RngStream s3(6, 0);
  for (double v : loss_samples(m, x, t, 0, 50, 1e-12, s3)) CHECK(std::abs(v - base) < 1e-6);
  CHECK_THROWS(loss_samples(m, x, t, 0, 1, 0.1, s3));
}

TEST_CASE("layer_score: single sample and order independence") {
  const Dataset d = gen_blobs(3, 40, 4, 1.0);
  const auto parts = split(d, {1.0, 0.0, 0.0, 1});
  RngStream init(3, 0);
  MlpModel m = init_mlp({{2, 8, 4}, Activation::Tanh, OutputHead::SoftmaxClassifier}, init);
  const RngStream root(7, 7);

  const Dataset one = parts.train.subset({5});
  RngStream s0 = root.substream(0);
  const auto losses = loss_samples(m, one.input(0), one.target(0), 1, 500, 0.05, s0);
  CHECK(layer_score(m, one, 1, 500, 0.05, root) == kde_entropy(losses));

  // each sample owns its substream, so the mean only depends on the set
  const Dataset fwd = parts.train.subset({0, 1, 2, 3, 4, 5});
  const Dataset rev = parts.train.subset({5, 4, 3, 2, 1, 0});
  std::vector<double> per_fwd, per_rev;
  for (Index i = 0; i < 6; ++i) {
    RngStream sf = root.substream(static_cast<std::uint64_t>(i));
    per_fwd.push_back(kde_entropy(loss_samples(m, fwd.input(i), fwd.target(i), 0, 300, 0.05, sf)));
  }
  double reversed_mean = 0.0;
  for (Index i = 5; i >= 0; --i) reversed_mean += per_fwd[static_cast<std::size_t>(i)];
  reversed_mean /= 6.0;
  CHECK(std::abs(layer_score(m, fwd, 0, 300, 0.05, root) - reversed_mean) < 1e-12);
  (void)rev;
}

TEST_CASE("select_layer: two-layer model, ranking invariants, CSV round trip") {
  const Dataset d = gen_blobs(5, 200, 4, 1.0);
  const auto parts = split(d, {1.0, 0.0, 0.0, 1});
  RngStream init(5, 0);
  MlpModel m = init_mlp({{2, 8, 4}, Activation::Tanh, OutputHead::SoftmaxClassifier}, init);
  train_mlp(m, parts.train, {5, 16, 1e-2}, init);
  const auto report = select_layer(m, parts.train.subset({0, 1, 2, 3}), {1000, 0.1, 11});
  REQUIRE(report.layers.size() == 2);
  REQUIRE(report.runner_up.has_value());
  CHECK(*report.runner_up == 1 - report.selected);
  CHECK(report.layers[static_cast<std::size_t>(report.selected)].score >=
        report.layers[static_cast<std::size_t>(*report.runner_up)].score);

  const auto again = select_layer(m, parts.train.subset({0, 1, 2, 3}), {1000, 0.1, 11});
  CHECK(again == report);
  CHECK(LayerScoreReport::from_csv(report.to_csv()) == report);
  CHECK(report.to_text().find("selected") != std::string::npos);
}

TEST_CASE("select_layer: single layer has no runner-up; ties favor lower index") {
  MlpModel m{{{2, 3}, Activation::Tanh, OutputHead::SoftmaxClassifier},
             {{Matrix::Ones(3, 2), Vector::Zero(3)}}};
  const Dataset d = gen_blobs(1, 12, 3, 1.0);
  const auto report = select_layer(m, d.subset({0, 1}), {200, 0.1, 1});
  CHECK(report.selected == 0);
  CHECK(!report.runner_up.has_value());

  const std::vector<LayerScore> tied = {{0, 1.0, 0.1}, {1, 2.0, 0.1}, {2, 2.0, 0.1},
                                        {3, -std::numeric_limits<double>::infinity(), 0.1}};
  CHECK(rank_layers(tied) == std::vector<Index>{1, 2, 0, 3});
}

TEST_CASE("select_layer: pinned ranking on the blob task") {
  // Measured once for seeds 42, 43, 44 with |S'| = 64 and m = 2000.
  const std::vector<Index> pinned = {2, 0, 1};
  for (std::uint64_t seed : {42, 43, 44}) {
    const auto parts = split(gen_blobs(seed, 4000, 4, 1.5), {0.6, 0.2, 0.2, seed});
    const MlpModel m = blob_model(seed, parts.train);
    std::vector<std::size_t> idx(64);
    for (std::size_t i = 0; i < 64; ++i) idx[i] = i;
    const auto report = select_layer(m, parts.train.subset(idx), {2000, 0.1, seed});
    MESSAGE("seed " << seed << "\n" << report.to_text());
    CHECK(report.ranking == pinned);
  }
}
