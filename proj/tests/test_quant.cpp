#include <doctest.h>

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "emq/error.hpp"
#include "emq/log.hpp"
#include "emq/quantile.hpp"
#include "oracles.hpp"

using namespace emq;

TEST_CASE("QuantileGrid construction and parsing") {
  const QuantileGrid g = QuantileGrid::percent99();
  REQUIRE(g.size() == 99);
  CHECK(g[0] == doctest::Approx(0.01));
  CHECK(g[98] == doctest::Approx(0.99));
  CHECK(g.is_symmetric());
  CHECK(g.centered_pairs().size() == 49);
  CHECK(g.centered_pairs().front() == std::pair<std::size_t, std::size_t>{0, 98});
  CHECK(g.find(0.05) == std::optional<std::size_t>(4));
  CHECK_FALSE(g.find(0.055).has_value());

  CHECK(QuantileGrid::parse("percent99") == g);
  CHECK(QuantileGrid::parse("uniform(3)").levels() == std::vector<double>{0.25, 0.5, 0.75});
  CHECK(QuantileGrid::parse("0.1, 0.5,0.9").size() == 3);

  CHECK_THROWS_AS(QuantileGrid({}), ConfigError);
  CHECK_THROWS_AS(QuantileGrid({0.0, 0.5}), ConfigError);
  CHECK_THROWS_AS(QuantileGrid({0.5, 1.0}), ConfigError);
  CHECK_THROWS_AS(QuantileGrid({0.6, 0.4}), ConfigError);
  CHECK_THROWS_AS(QuantileGrid({0.4, 0.4}), ConfigError);
  CHECK_THROWS_AS(QuantileGrid::parse("uniform(x)"), ConfigError);
  CHECK_THROWS_AS(QuantileGrid::parse("0.1,abc"), ConfigError);
  CHECK_THROWS_AS(QuantileGrid({0.1, 0.6}).centered_pairs(), ConfigError);
  CHECK_THROWS_AS(QuantileGrid({0.5}).centered_pairs(), ConfigError);
}

TEST_CASE("normal_quantile against the bisection oracle") {
  CHECK(normal_quantile(0.5) == 0.0);
  CHECK(normal_quantile(0.975) == doctest::Approx(1.959964).epsilon(1e-6));
  CHECK(std::abs(normal_quantile(0.975) - oracle::normal_quantile(0.975)) < 1e-12);

  const QuantileGrid g = QuantileGrid::percent99();
  for (std::size_t k = 0; k < g.size(); ++k) {
    CHECK(std::abs(normal_quantile(g[k]) + normal_quantile(g[g.size() - 1 - k])) < 1e-12);
    CHECK(std::abs(normal_quantile(g[k]) - oracle::normal_quantile(g[k])) < 1e-12);
    CHECK(std::abs(oracle::normal_cdf(normal_quantile(g[k])) - g[k]) < 1e-8);
    CHECK(g.normal_scores()[k] == normal_quantile(g[k]));
  }

  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 2000; ++i) {
    const double tau = std::pow(u(rng), 6.0);  // crowds the lower tail
    if (tau <= 0.0) continue;
    CHECK(std::abs(oracle::normal_cdf(normal_quantile(tau)) - tau) <= 1e-8 * std::max(tau, 1e-3));
  }
  CHECK(std::abs(oracle::normal_cdf(normal_quantile(1e-12)) / 1e-12 - 1.0) < 1e-8);

  CHECK_THROWS_AS(normal_quantile(0.0), DomainError);
  CHECK_THROWS_AS(normal_quantile(1.0), DomainError);
  CHECK_THROWS_AS(normal_quantile(std::nan("")), DomainError);
}

TEST_CASE("normal cdf and pdf") {
  CHECK(normal_cdf(0.0) == 0.5);
  CHECK(normal_pdf(0.0) == doctest::Approx(0.3989422804014327).epsilon(1e-15));
  for (double x : {-7.0, -2.0, -0.3, 0.8, 4.0}) {
    CHECK(normal_cdf(x) == doctest::Approx(oracle::normal_cdf(x)).epsilon(1e-14));
    CHECK(normal_pdf(x) == doctest::Approx(oracle::normal_pdf(x)).epsilon(1e-14));
  }
}

TEST_CASE("pinball loss values") {
  CHECK(pinball_loss(2.0, 2.0, 0.3) == 0.0);
  CHECK(pinball_loss(1.0, 0.0, 0.5) == 0.5);
  CHECK(pinball_loss(0.0, 1.0, 0.9) == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(pinball_grad(0.0, 1.0, 0.9) == doctest::Approx(0.1));
  CHECK(pinball_grad(1.0, 0.0, 0.9) == doctest::Approx(-0.9));
  CHECK_THROWS_AS(pinball_loss(0.0, 1.0, 1.0), DomainError);
}

TEST_CASE("pinball loss is nonnegative, zero only at y = q, and convex in q") {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n(0.0, 3.0);
  std::uniform_real_distribution<double> u(0.001, 0.999);
  for (int i = 0; i < 5000; ++i) {
    const double y = n(rng);
    const double a = n(rng);
    const double b = n(rng);
    const double tau = u(rng);
    CHECK(pinball_loss(y, a, tau) >= 0.0);
    if (a != y) CHECK(pinball_loss(y, a, tau) > 0.0);
    const double mid = pinball_loss(y, 0.5 * (a + b), tau);
    CHECK(mid <= 0.5 * (pinball_loss(y, a, tau) + pinball_loss(y, b, tau)) + 1e-12);
  }
}

TEST_CASE("multi_quantile_loss") {
  const QuantileGrid g({0.25, 0.75});
  const std::vector<double> y{0.0};
  CHECK(multi_quantile_loss(y, Matrix::from_rows({{-1.0, 1.0}}), g) == 0.5);
  CHECK(multi_quantile_loss(y, Matrix::from_rows({{0.0, 0.0}}), g) == 0.0);

  std::mt19937_64 rng(4);
  std::normal_distribution<double> n;
  const QuantileGrid p = QuantileGrid::percent99();
  Matrix q(20, p.size());
  std::vector<double> ys(20);
  for (double& v : q.values()) v = n(rng);
  for (double& v : ys) v = n(rng);
  const LossWeights ones{std::vector<double>(p.size(), 1.0)};
  CHECK(multi_quantile_loss(ys, q, p) == multi_quantile_loss(ys, q, p, &ones));
  CHECK_THROWS_AS(multi_quantile_loss(ys, Matrix(20, 3), p), DimensionError);
  CHECK_THROWS_AS(multi_quantile_loss(std::vector<double>(3), q, p), DimensionError);
}

TEST_CASE("EMQW weights match the Monte-Carlo oracle") {
  const QuantileGrid g = QuantileGrid::percent99();
  const LossWeights w = emqw_weights(g);
  REQUIRE(w.values.size() == 99);
  CHECK(w.values[49] == doctest::Approx(std::sqrt(2.0 * 3.14159265358979323846)).epsilon(1e-14));
  CHECK(w.values[49] == doctest::Approx(2.506628).epsilon(1e-6));
  CHECK(w.values[0] == doctest::Approx(37.5204).epsilon(1e-5));
  CHECK(w.values[0] == doctest::Approx(1.0 / oracle::normal_pdf(-2.326348)).epsilon(1e-5));
  for (std::size_t k = 0; k < 99; ++k) {
    CHECK(w.values[k] == doctest::Approx(w.values[98 - k]).epsilon(1e-12));
  }

  // 2e6 draws keep this unit test fast; the acceptance suite runs 1e7.
  const auto mc = oracle::monte_carlo_weights(g.levels(), 2'000'000, 99);
  for (std::size_t k = 0; k < 99; ++k) {
    CHECK(std::abs(mc[k] / w.values[k] - 1.0) < 0.01);
  }
}

TEST_CASE("interval score branches") {
  CHECK(interval_score(0.0, 1.0, 0.5, 0.2) == 1.0);
  CHECK(interval_score(0.0, 1.0, 1.5, 0.2) == doctest::Approx(6.0).epsilon(1e-15));
  CHECK(interval_score(0.0, 1.0, -0.5, 0.2) == doctest::Approx(6.0).epsilon(1e-15));
  CHECK(interval_score(2.0, 2.0, 2.0, 0.2) == 0.0);

  std::vector<std::string> warnings;
  {
    log::ScopedSink sink([&](const std::string& m) { warnings.push_back(m); });
    CHECK(std::isfinite(interval_score(1.0, 0.0, 0.5, 0.2)));
  }
  CHECK(warnings.size() == 1);
  CHECK_THROWS_AS(interval_score(0.0, 1.0, 0.5, 0.0), DomainError);
}

TEST_CASE("true quantiles minimize the expected interval score") {
  std::mt19937_64 rng(21);
  std::normal_distribution<double> n;
  std::vector<double> ys(200000);
  for (double& y : ys) y = n(rng);
  const double alpha = 0.2;
  const double lo = oracle::normal_quantile(alpha / 2.0);
  const double hi = oracle::normal_quantile(1.0 - alpha / 2.0);
  auto mean_score = [&](double l, double u) {
    double s = 0.0;
    for (double y : ys) s += interval_score(l, u, y, alpha);
    return s / static_cast<double>(ys.size());
  };
  const double best = mean_score(lo, hi);
  for (double dl : {-0.3, 0.0, 0.3}) {
    for (double du : {-0.3, 0.0, 0.3}) {
      if (dl == 0.0 && du == 0.0) continue;
      CHECK(mean_score(lo + dl, hi + du) > best);
    }
  }
}
