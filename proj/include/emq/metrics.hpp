#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "emq/matrix.hpp"
#include "emq/quantile.hpp"

namespace emq::metrics {

inline const std::vector<double> kTailLevels = {0.05, 0.10, 0.15, 0.20};

// Fraction of rows with q_lo(x_i) < y_i < q_hi(x_i) for every centered pair,
// ordered as grid.centered_pairs() (outermost first).
std::vector<double> pair_coverage(const Matrix& quantiles, std::span<const double> y,
                                  const QuantileGrid& grid);

// Mean |q_hi - q_lo| for every centered pair.
std::vector<double> pair_width(const Matrix& quantiles, const QuantileGrid& grid);

// Expected interval calibration error over all centered pairs.
double eice(const Matrix& quantiles, std::span<const double> y, const QuantileGrid& grid);

// Expected interval sharpness over all centered pairs.
double eis(const Matrix& quantiles, const QuantileGrid& grid);

// Tail interval calibration error over the intervals (q_tau, q_{1-tau}).
double tice(const Matrix& quantiles, std::span<const double> y, const QuantileGrid& grid,
            std::span<const double> tail_levels = kTailLevels);

// Empirical frequency of y_i <= q_k(x_i) per level.
std::vector<double> calibration_curve(const Matrix& quantiles, std::span<const double> y,
                                      const QuantileGrid& grid);

// mean_k |tau_k - calibration_curve_k|; the validation metric of the adaptive-T rule.
double ece(const Matrix& quantiles, std::span<const double> y, const QuantileGrid& grid);

struct DensityCell {
  double midpoint = 0.0;
  double density = 0.0;
  double width = 0.0;
  // false when the fan crosses (width < 0) or collapses (width == 0).
  bool valid = true;
  bool infinite = false;
};

// Piecewise-constant density between consecutive quantiles of one fan.
std::vector<DensityCell> implied_density(std::span<const double> fan, const QuantileGrid& grid);

struct EvalReport {
  double eice = 0.0;
  double eis = 0.0;
  double tice = 0.0;
  double ece = 0.0;
  std::vector<double> per_pair_coverage;
  std::vector<double> per_pair_width;
  std::vector<double> per_level_calibration;
  std::size_t rows = 0;
  // Rows whose fan is not strictly increasing.
  std::size_t crossing_rows = 0;
  std::map<std::string, std::string> metadata;
};

EvalReport evaluate(const Matrix& quantiles, std::span<const double> y, const QuantileGrid& grid);

// JSON text (2-space indent) with raw values and the same values x100.
std::string report_to_json(const EvalReport& report);
// Header line plus one data row.
std::string report_to_csv(const EvalReport& report);

}  // namespace emq::metrics
