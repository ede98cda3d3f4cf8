#include "emq/metrics.hpp"

#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "emq/error.hpp"

namespace emq::metrics {
namespace {

void check_inputs(const Matrix& quantiles, std::span<const double> y, const QuantileGrid& grid) {
  if (quantiles.cols() != grid.size()) {
    throw DimensionError("metrics: quantile matrix has " + std::to_string(quantiles.cols()) +
                         " columns, grid has " + std::to_string(grid.size()));
  }
  if (quantiles.rows() != y.size()) {
    throw DimensionError("metrics: label count does not match quantile rows");
  }
  if (y.empty()) throw DataError("metrics: need at least one row");
}

double covered_fraction(const Matrix& quantiles, std::span<const double> y, std::size_t lo,
                        std::size_t hi) {
  std::size_t inside = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (quantiles(i, lo) < y[i] && y[i] < quantiles(i, hi)) ++inside;
  }
  return static_cast<double>(inside) / static_cast<double>(y.size());
}

std::string format_double(double v) {
  std::ostringstream out;
  out << std::setprecision(17) << v;
  return out.str();
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

std::vector<double> pair_coverage(const Matrix& quantiles, std::span<const double> y,
                                  const QuantileGrid& grid) {
  check_inputs(quantiles, y, grid);
  std::vector<double> out;
  for (auto [lo, hi] : grid.centered_pairs()) out.push_back(covered_fraction(quantiles, y, lo, hi));
  return out;
}

std::vector<double> pair_width(const Matrix& quantiles, const QuantileGrid& grid) {
  if (quantiles.cols() != grid.size()) throw DimensionError("metrics: grid/column mismatch");
  if (quantiles.rows() == 0) throw DataError("metrics: need at least one row");
  std::vector<double> out;
  for (auto [lo, hi] : grid.centered_pairs()) {
    double total = 0.0;
    for (std::size_t i = 0; i < quantiles.rows(); ++i) {
      total += std::abs(quantiles(i, hi) - quantiles(i, lo));
    }
    out.push_back(total / static_cast<double>(quantiles.rows()));
  }
  return out;
}

double eice(const Matrix& quantiles, std::span<const double> y, const QuantileGrid& grid) {
  const auto coverage = pair_coverage(quantiles, y, grid);
  const auto pairs = grid.centered_pairs();
  double total = 0.0;
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    total += std::abs(1.0 - 2.0 * grid[pairs[p].first] - coverage[p]);
  }
  return total / static_cast<double>(pairs.size());
}

double eis(const Matrix& quantiles, const QuantileGrid& grid) {
  const auto widths = pair_width(quantiles, grid);
  double total = 0.0;
  for (double w : widths) total += w;
  return total / static_cast<double>(widths.size());
}

double tice(const Matrix& quantiles, std::span<const double> y, const QuantileGrid& grid,
            std::span<const double> tail_levels) {
  check_inputs(quantiles, y, grid);
  if (tail_levels.empty()) throw ConfigError("tice: no tail levels");
  double total = 0.0;
  for (double tau : tail_levels) {
    const auto lo = grid.find(tau);
    const auto hi = grid.find(1.0 - tau);
    if (!lo || !hi) {
      throw ConfigError("tice: tail level " + format_double(tau) + " (or its complement) not in grid");
    }
    total += std::abs(1.0 - 2.0 * tau - covered_fraction(quantiles, y, *lo, *hi));
  }
  return total / static_cast<double>(tail_levels.size());
}

std::vector<double> calibration_curve(const Matrix& quantiles, std::span<const double> y,
                                      const QuantileGrid& grid) {
  check_inputs(quantiles, y, grid);
  std::vector<double> curve(grid.size(), 0.0);
  for (std::size_t i = 0; i < y.size(); ++i) {
    auto q = quantiles.row(i);
    for (std::size_t k = 0; k < q.size(); ++k) {
      if (y[i] <= q[k]) curve[k] += 1.0;
    }
  }
  for (double& c : curve) c /= static_cast<double>(y.size());
  return curve;
}

double ece(const Matrix& quantiles, std::span<const double> y, const QuantileGrid& grid) {
  const auto curve = calibration_curve(quantiles, y, grid);
  double total = 0.0;
  for (std::size_t k = 0; k < curve.size(); ++k) total += std::abs(grid[k] - curve[k]);
  return total / static_cast<double>(curve.size());
}

std::vector<DensityCell> implied_density(std::span<const double> fan, const QuantileGrid& grid) {
  if (fan.size() != grid.size()) throw DimensionError("implied_density: fan/grid size mismatch");
  if (fan.size() < 2) throw DataError("implied_density: need at least two quantiles");
  std::vector<DensityCell> cells;
  cells.reserve(fan.size() - 1);
  for (std::size_t k = 0; k + 1 < fan.size(); ++k) {
    DensityCell cell;
    cell.width = fan[k + 1] - fan[k];
    cell.midpoint = 0.5 * (fan[k] + fan[k + 1]);
    const double mass = grid[k + 1] - grid[k];
    if (cell.width == 0.0) {
      cell.density = std::numeric_limits<double>::infinity();
      cell.infinite = true;
      cell.valid = false;
    } else {
      cell.density = mass / cell.width;
      cell.valid = cell.width > 0.0;
    }
    cells.push_back(cell);
  }
  return cells;
}

EvalReport evaluate(const Matrix& quantiles, std::span<const double> y, const QuantileGrid& grid) {
  EvalReport r;
  r.per_pair_coverage = pair_coverage(quantiles, y, grid);
  r.per_pair_width = pair_width(quantiles, grid);
  r.per_level_calibration = calibration_curve(quantiles, y, grid);
  r.eice = eice(quantiles, y, grid);
  r.eis = eis(quantiles, grid);
  r.tice = tice(quantiles, y, grid);
  r.ece = ece(quantiles, y, grid);
  r.rows = y.size();
  for (std::size_t i = 0; i < quantiles.rows(); ++i) {
    auto q = quantiles.row(i);
    for (std::size_t k = 1; k < q.size(); ++k) {
      if (!(q[k] > q[k - 1])) {
        ++r.crossing_rows;
        break;
      }
    }
  }
  return r;
}

std::string report_to_json(const EvalReport& report) {
  nlohmann::ordered_json j;
  j["metadata"] = report.metadata;
  j["rows"] = report.rows;
  j["crossing_rows"] = report.crossing_rows;
  j["eice"] = report.eice;
  j["eis"] = report.eis;
  j["tice"] = report.tice;
  j["ece"] = report.ece;
  j["eice_x100"] = report.eice * 100.0;
  j["eis_x100"] = report.eis * 100.0;
  j["tice_x100"] = report.tice * 100.0;
  j["ece_x100"] = report.ece * 100.0;
  j["per_pair_coverage"] = report.per_pair_coverage;
  j["per_pair_width"] = report.per_pair_width;
  j["per_level_calibration"] = report.per_level_calibration;
  return j.dump(2) + "\n";
}

std::string report_to_csv(const EvalReport& report) {
  std::ostringstream header;
  std::ostringstream row;
  for (const auto& [key, value] : report.metadata) {
    header << csv_escape(key) << ',';
    row << csv_escape(value) << ',';
  }
  header << "rows,crossing_rows,eice,eis,tice,ece,eice_x100,eis_x100,tice_x100,ece_x100\n";
  row << report.rows << ',' << report.crossing_rows << ',' << format_double(report.eice) << ','
      << format_double(report.eis) << ',' << format_double(report.tice) << ','
      << format_double(report.ece) << ',' << format_double(report.eice * 100.0) << ','
      << format_double(report.eis * 100.0) << ',' << format_double(report.tice * 100.0) << ','
      << format_double(report.ece * 100.0) << '\n';
  return header.str() + row.str();
}

}  // namespace emq::metrics
