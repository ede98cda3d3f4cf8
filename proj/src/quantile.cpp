#include "emq/quantile.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "emq/error.hpp"
#include "emq/log.hpp"

namespace emq {
namespace {

constexpr double kSymmetryTolerance = 1e-9;

// Rational approximation of the lower half of the inverse normal CDF (Acklam),
// relative error ~1e-9 before refinement. Requires 0 < p <= 0.5.
double initial_lower_quantile(double p) {
  static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                 -2.759285104469687e+02, 1.383577518672690e+02,
                                 -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                 -1.556989798598866e+02, 6.680131188771972e+01,
                                 -1.328068155288572e+01};
  static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                 -2.400758277161838e+00, -2.549732539343734e+00,
                                 4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                                 2.445134137142996e+00, 3.754408661907416e+00};
  constexpr double p_low = 0.02425;
  if (p < p_low) {
    const double q = std::sqrt(-2.0 * std::log(p));
    return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
           ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  const double q = p - 0.5;
  const double r = q * q;
  return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
         (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
}

double lower_quantile(double p) {
  double x = initial_lower_quantile(p);
  // One Halley step against the erfc-based CDF.
  const double e = 0.5 * std::erfc(-x / std::numbers::sqrt2) - p;
  const double u = e * std::sqrt(2.0 * std::numbers::pi) * std::exp(0.5 * x * x);
  x = x - u / (1.0 + 0.5 * x * u);
  return x;
}

}  // namespace

QuantileGrid::QuantileGrid(std::vector<double> levels) : levels_(std::move(levels)) {
  if (levels_.empty()) throw ConfigError("QuantileGrid: no levels");
  for (std::size_t k = 0; k < levels_.size(); ++k) {
    const double tau = levels_[k];
    if (!(tau > 0.0 && tau < 1.0)) {
      throw ConfigError("QuantileGrid: level " + std::to_string(tau) + " outside (0, 1)");
    }
    if (k > 0 && !(tau > levels_[k - 1])) {
      throw ConfigError("QuantileGrid: levels must be strictly increasing");
    }
  }
  normal_scores_.reserve(levels_.size());
  for (double tau : levels_) normal_scores_.push_back(normal_quantile(tau));
}

QuantileGrid QuantileGrid::percent99() { return uniform(99); }

QuantileGrid QuantileGrid::uniform(std::size_t k) {
  if (k == 0) throw ConfigError("QuantileGrid::uniform: K must be positive");
  std::vector<double> levels(k);
  for (std::size_t i = 0; i < k; ++i) {
    levels[i] = static_cast<double>(i + 1) / static_cast<double>(k + 1);
  }
  return QuantileGrid(std::move(levels));
}

QuantileGrid QuantileGrid::parse(std::string_view spec) {
  if (spec == "percent99") return percent99();
  if (spec.starts_with("uniform(") && spec.ends_with(")")) {
    const std::string inner(spec.substr(8, spec.size() - 9));
    std::size_t used = 0;
    long long k = 0;
    try {
      k = std::stoll(inner, &used);
    } catch (const std::exception&) {
      throw ConfigError("grid spec: bad count in '" + std::string(spec) + "'");
    }
    if (used != inner.size() || k <= 0) {
      throw ConfigError("grid spec: bad count in '" + std::string(spec) + "'");
    }
    return uniform(static_cast<std::size_t>(k));
  }
  std::vector<double> levels;
  std::stringstream ss{std::string(spec)};
  std::string token;
  while (std::getline(ss, token, ',')) {
    try {
      std::size_t used = 0;
      levels.push_back(std::stod(token, &used));
      while (used < token.size() && std::isspace(static_cast<unsigned char>(token[used]))) ++used;
      if (used != token.size()) throw ConfigError("");
    } catch (const std::exception&) {
      throw ConfigError("grid spec: cannot parse level '" + token + "'");
    }
  }
  return QuantileGrid(std::move(levels));
}

bool QuantileGrid::is_symmetric() const {
  const std::size_t k = levels_.size();
  for (std::size_t i = 0; i < k; ++i) {
    if (std::abs(levels_[i] + levels_[k - 1 - i] - 1.0) > kSymmetryTolerance) return false;
  }
  return true;
}

std::vector<std::pair<std::size_t, std::size_t>> QuantileGrid::centered_pairs() const {
  if (!is_symmetric() || levels_.size() < 2) {
    throw ConfigError("QuantileGrid: centered intervals need a symmetric grid with K >= 2");
  }
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  const std::size_t k = levels_.size();
  for (std::size_t i = 0; i < k / 2; ++i) pairs.emplace_back(i, k - 1 - i);
  return pairs;
}

std::optional<std::size_t> QuantileGrid::find(double tau) const {
  for (std::size_t k = 0; k < levels_.size(); ++k) {
    if (std::abs(levels_[k] - tau) <= kSymmetryTolerance) return k;
  }
  return std::nullopt;
}

double normal_quantile(double tau) {
  if (!(tau > 0.0 && tau < 1.0)) {
    throw DomainError("normal_quantile: tau=" + std::to_string(tau) + " outside (0, 1)");
  }
  if (tau == 0.5) return 0.0;
  // 1 - tau is exact for tau >= 0.5, so the upper half reuses the lower tail.
  return tau < 0.5 ? lower_quantile(tau) : -lower_quantile(1.0 - tau);
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

double normal_pdf(double x) {
  return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
}

double pinball_loss(double y, double q, double tau) {
  if (!(tau > 0.0 && tau < 1.0)) throw DomainError("pinball_loss: tau outside (0, 1)");
  return (y - q) * (tau - (y < q ? 1.0 : 0.0));
}

double pinball_grad(double y, double q, double tau) { return (y < q ? 1.0 : 0.0) - tau; }

double multi_quantile_loss(std::span<const double> y, const Matrix& quantiles,
                           const QuantileGrid& grid, const LossWeights* weights) {
  if (quantiles.cols() != grid.size()) {
    throw DimensionError("multi_quantile_loss: quantile matrix has " +
                         std::to_string(quantiles.cols()) + " columns, grid has " +
                         std::to_string(grid.size()));
  }
  if (quantiles.rows() != y.size()) {
    throw DimensionError("multi_quantile_loss: label count does not match quantile rows");
  }
  if (weights != nullptr && weights->values.size() != grid.size()) {
    throw DimensionError("multi_quantile_loss: weight vector does not match grid");
  }
  if (y.empty()) return 0.0;
  const auto& tau = grid.levels();
  double total = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    auto q = quantiles.row(i);
    double row = 0.0;
    for (std::size_t k = 0; k < tau.size(); ++k) {
      const double w = weights ? weights->values[k] : 1.0;
      row += w * (y[i] - q[k]) * (tau[k] - (y[i] < q[k] ? 1.0 : 0.0));
    }
    total += row;
  }
  return total / static_cast<double>(y.size());
}

LossWeights emqw_weights(const QuantileGrid& grid) {
  LossWeights w;
  w.values.reserve(grid.size());
  for (double z : grid.normal_scores()) w.values.push_back(1.0 / normal_pdf(z));
  return w;
}

double interval_score(double l, double u, double y, double tau) {
  if (!(tau > 0.0 && tau < 1.0)) throw DomainError("interval_score: tau outside (0, 1)");
  if (u < l) {
    std::ostringstream msg;
    msg << "interval_score: upper bound " << u << " below lower bound " << l;
    log::warn(msg.str());
  }
  double score = u - l;
  if (y < l) score += (2.0 / tau) * (l - y);
  if (y > u) score += (2.0 / tau) * (y - u);
  return score;
}

}  // namespace emq
