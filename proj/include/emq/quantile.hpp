#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "emq/matrix.hpp"

namespace emq {

// Strictly increasing probability levels in (0, 1).
class QuantileGrid {
 public:
  explicit QuantileGrid(std::vector<double> levels);

  // {0.01, 0.02, ..., 0.99}
  static QuantileGrid percent99();
  // {1/(K+1), ..., K/(K+1)}
  static QuantileGrid uniform(std::size_t k);
  // Accepts "percent99", "uniform(K)" or a comma-separated list of levels.
  static QuantileGrid parse(std::string_view spec);

  const std::vector<double>& levels() const { return levels_; }
  std::size_t size() const { return levels_.size(); }
  double operator[](std::size_t k) const { return levels_[k]; }

  // Standard-normal quantile of every level, computed once.
  const std::vector<double>& normal_scores() const { return normal_scores_; }

  // True when tau_k + tau_{K+1-k} = 1 for every k (within 1e-9).
  bool is_symmetric() const;

  // Index pairs (k, K-1-k) for the centered intervals, innermost last. Throws
  // ConfigError for an asymmetric grid.
  std::vector<std::pair<std::size_t, std::size_t>> centered_pairs() const;

  // Index of `tau` within 1e-9, if present.
  std::optional<std::size_t> find(double tau) const;

  bool operator==(const QuantileGrid& other) const { return levels_ == other.levels_; }

 private:
  std::vector<double> levels_;
  std::vector<double> normal_scores_;
};

// Inverse of the standard-normal CDF. Throws DomainError outside (0, 1).
double normal_quantile(double tau);
double normal_cdf(double x);
double normal_pdf(double x);

// (y - q)(tau - 1{y < q})
double pinball_loss(double y, double q, double tau);
// d/dq of pinball_loss: 1{y < q} - tau.
double pinball_grad(double y, double q, double tau);

struct LossWeights {
  std::vector<double> values;
};

// Mean over rows of sum_k w_k L_{tau_k}(y_i, Q_ik); unit weights when `weights`
// is null.
double multi_quantile_loss(std::span<const double> y, const Matrix& quantiles,
                           const QuantileGrid& grid, const LossWeights* weights = nullptr);

// w_tau = 1 / E_{Y~N(0,1)}[L_tau(Y, Phi^-1(tau))] = 1 / phi(Phi^-1(tau)).
LossWeights emqw_weights(const QuantileGrid& grid);

// Interval score of the central (1 - tau) interval [l, u]. Warns (does not
// throw) when u < l.
double interval_score(double l, double u, double y, double tau);

}  // namespace emq
