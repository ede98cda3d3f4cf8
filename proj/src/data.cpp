#include "emq/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "emq/error.hpp"
#include "emq/log.hpp"
#include "emq/quantile.hpp"

namespace emq::data {
namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(field));
      field.clear();
    } else if (c != '\r') {
      field += c;
    }
  }
  fields.push_back(std::move(field));
  return fields;
}

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t");
  return s.substr(begin, end - begin + 1);
}

bool is_missing(const std::string& field) {
  return field.empty() || field == "NA" || field == "?" || field == "nan" || field == "NaN" ||
         field == "NAN" || field == "null";
}

// Returns false for non-numeric text; NaN/inf parse as non-finite.
bool parse_number(const std::string& field, double& value) {
  const char* begin = field.data();
  const char* end = begin + field.size();
  if (begin != end && *begin == '+') ++begin;
  auto [ptr, ec] = std::from_chars(begin, end, value);
  return ec == std::errc() && ptr == end;
}

double mean_of(std::span<const double> v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double sample_std(std::span<const double> v, double mean) {
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

Dataset load_csv(const std::filesystem::path& path, const LabelColumn& label, bool header) {
  std::ifstream in(path);
  if (!in) throw DataError("load_csv: cannot open '" + path.string() + "'");

  std::string line;
  std::vector<std::string> names;
  std::size_t columns = 0;
  if (header) {
    if (!std::getline(in, line)) throw DataError("load_csv: '" + path.string() + "' is empty");
    for (auto& name : split_csv_line(line)) names.push_back(trim(name));
    columns = names.size();
  }

  std::vector<std::vector<double>> rows;
  std::size_t dropped = 0;
  std::size_t line_no = header ? 1 : 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    auto fields = split_csv_line(line);
    if (columns == 0) {
      columns = fields.size();
      for (std::size_t c = 0; c < columns; ++c) names.push_back("col" + std::to_string(c));
    }
    if (fields.size() != columns) {
      throw DataError("load_csv: line " + std::to_string(line_no) + " has " +
                      std::to_string(fields.size()) + " fields, expected " +
                      std::to_string(columns));
    }
    std::vector<double> values(columns);
    bool missing = false;
    for (std::size_t c = 0; c < columns; ++c) {
      const std::string field = trim(fields[c]);
      if (is_missing(field)) {
        missing = true;
        continue;
      }
      if (!parse_number(field, values[c])) {
        throw DataError("load_csv: non-numeric value '" + field + "' in column '" + names[c] +
                        "' (line " + std::to_string(line_no) + ")");
      }
      if (!std::isfinite(values[c])) missing = true;
    }
    if (missing) {
      ++dropped;
      continue;
    }
    rows.push_back(std::move(values));
  }
  if (rows.empty() && dropped == 0) {
    throw DataError("load_csv: '" + path.string() + "' has no data rows");
  }

  std::size_t label_index = 0;
  if (const auto* name = std::get_if<std::string>(&label)) {
    auto it = std::find(names.begin(), names.end(), *name);
    if (it == names.end()) throw DataError("load_csv: label column '" + *name + "' not found");
    label_index = static_cast<std::size_t>(it - names.begin());
  } else {
    label_index = std::get<std::size_t>(label);
    if (label_index >= columns) {
      throw DataError("load_csv: label column index " + std::to_string(label_index) +
                      " out of range (" + std::to_string(columns) + " columns)");
    }
  }

  Dataset ds;
  ds.source = path.string();
  ds.dropped_rows = dropped;
  ds.label_name = names[label_index];
  for (std::size_t c = 0; c < columns; ++c) {
    if (c != label_index) ds.feature_names.push_back(names[c]);
  }
  ds.features = Matrix(rows.size(), columns - 1);
  ds.labels.resize(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::size_t f = 0;
    for (std::size_t c = 0; c < columns; ++c) {
      if (c == label_index) {
        ds.labels[r] = rows[r][c];
      } else {
        ds.features(r, f++) = rows[r][c];
      }
    }
  }
  if (dropped > 0) {
    log::warn("load_csv: dropped " + std::to_string(dropped) + " rows with missing values from '" +
              path.string() + "'");
  }
  if (ds.size() < kMinRows) {
    throw DataError("load_csv: only " + std::to_string(ds.size()) + " usable rows (need >= " +
                    std::to_string(kMinRows) + ")");
  }
  return ds;
}

Dataset subset(const Dataset& dataset, std::span<const std::size_t> rows) {
  Dataset out;
  out.features = dataset.features.gather_rows(rows);
  out.labels.reserve(rows.size());
  for (std::size_t r : rows) out.labels.push_back(dataset.labels.at(r));
  out.feature_names = dataset.feature_names;
  out.label_name = dataset.label_name;
  out.source = dataset.source;
  return out;
}

NormStats fit_norm_stats(const Dataset& train) {
  if (train.size() < 2) throw DataError("standardize: need at least two training rows");
  NormStats stats;
  std::vector<double> column(train.size());
  for (std::size_t c = 0; c < train.dim(); ++c) {
    for (std::size_t r = 0; r < train.size(); ++r) column[r] = train.features(r, c);
    const double mean = mean_of(column);
    const double sd = sample_std(column, mean);
    if (!(sd > 0.0)) {
      const std::string name =
          c < train.feature_names.size() ? train.feature_names[c] : std::to_string(c);
      log::warn("standardize: dropping constant feature column '" + name + "'");
      continue;
    }
    stats.kept_features.push_back(c);
    stats.feature_mean.push_back(mean);
    stats.feature_std.push_back(sd);
  }
  if (stats.kept_features.empty()) throw DataError("standardize: every feature column is constant");
  stats.label_mean = mean_of(train.labels);
  stats.label_std = sample_std(train.labels, stats.label_mean);
  if (!(stats.label_std > 0.0)) throw DataError("standardize: label column is constant");
  return stats;
}

Matrix NormStats::apply_features(const Matrix& raw) const {
  Matrix out(raw.rows(), kept_features.size());
  for (std::size_t r = 0; r < raw.rows(); ++r) {
    for (std::size_t j = 0; j < kept_features.size(); ++j) {
      const std::size_t c = kept_features[j];
      if (c >= raw.cols()) throw DimensionError("NormStats: feature column out of range");
      out(r, j) = (raw(r, c) - feature_mean[j]) / feature_std[j];
    }
  }
  return out;
}

Dataset NormStats::apply(const Dataset& dataset) const {
  Dataset out;
  out.features = apply_features(dataset.features);
  out.labels.reserve(dataset.size());
  for (double y : dataset.labels) out.labels.push_back((y - label_mean) / label_std);
  for (std::size_t c : kept_features) {
    if (c < dataset.feature_names.size()) out.feature_names.push_back(dataset.feature_names[c]);
  }
  out.label_name = dataset.label_name;
  out.source = dataset.source;
  out.dropped_rows = dataset.dropped_rows;
  return out;
}

std::vector<double> NormStats::labels_to_raw(std::span<const double> normalized) const {
  std::vector<double> out;
  out.reserve(normalized.size());
  for (double y : normalized) out.push_back(label_to_raw(y));
  return out;
}

Matrix NormStats::features_to_raw(const Matrix& normalized) const {
  Matrix out(normalized.rows(), normalized.cols());
  for (std::size_t r = 0; r < normalized.rows(); ++r) {
    for (std::size_t j = 0; j < normalized.cols(); ++j) {
      out(r, j) = normalized(r, j) * feature_std.at(j) + feature_mean.at(j);
    }
  }
  return out;
}

Standardized standardize(const Dataset& train, std::span<const Dataset> apply_to) {
  Standardized result;
  result.stats = fit_norm_stats(train);
  for (const auto& ds : apply_to) result.datasets.push_back(result.stats.apply(ds));
  return result;
}

SplitIndices split(std::size_t n, double test_fraction, double val_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw ConfigError("split: test_fraction must lie in (0, 1)");
  }
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
    throw ConfigError("split: val_fraction must lie in (0, 1)");
  }
  const auto n_test = static_cast<std::size_t>(std::llround(static_cast<double>(n) * test_fraction));
  if (n_test == 0 || n_test >= n) throw DataError("split: test fraction leaves an empty side");
  const std::size_t pool = n - n_test;
  const auto n_val = static_cast<std::size_t>(std::llround(static_cast<double>(pool) * val_fraction));
  if (n_val == 0 || n_val >= pool) throw DataError("split: validation fraction leaves an empty side");

  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);

  SplitIndices out;
  out.test.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_test));
  out.val.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_test),
                 perm.begin() + static_cast<std::ptrdiff_t>(n_test + n_val));
  out.train.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_test + n_val), perm.end());
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.val.begin(), out.val.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

PreparedSplit prepare(const Dataset& dataset, const SplitIndices& indices) {
  std::vector<std::size_t> portion = indices.train;
  portion.insert(portion.end(), indices.val.begin(), indices.val.end());
  std::sort(portion.begin(), portion.end());
  PreparedSplit out;
  out.stats = fit_norm_stats(subset(dataset, portion));
  out.train = out.stats.apply(subset(dataset, indices.train));
  out.val = out.stats.apply(subset(dataset, indices.val));
  out.test = out.stats.apply(subset(dataset, indices.test));
  return out;
}

SyntheticKind synthetic_kind_from_string(const std::string& name) {
  if (name == "hetero-gaussian") return SyntheticKind::kHeteroGaussian;
  if (name == "skewed") return SyntheticKind::kSkewed;
  if (name == "bimodal") return SyntheticKind::kBimodal;
  throw ConfigError("unknown synthetic kind '" + name + "'");
}

const char* to_string(SyntheticKind kind) {
  switch (kind) {
    case SyntheticKind::kHeteroGaussian:
      return "hetero-gaussian";
    case SyntheticKind::kSkewed:
      return "skewed";
    case SyntheticKind::kBimodal:
      return "bimodal";
  }
  return "unknown";
}

namespace {

constexpr double kBimodalShift = 2.0;
constexpr double kBimodalScale = 0.3;
const double kSkewMean = std::exp(0.125);  // E[exp(eps / 2)]

}  // namespace

double SyntheticLaw::cdf(double y, std::span<const double> x) const {
  if (x.size() < 2) throw DimensionError("SyntheticLaw: need two inputs");
  switch (kind_) {
    case SyntheticKind::kHeteroGaussian:
      return normal_cdf((y - x[0]) / (1.0 + std::abs(x[1])));
    case SyntheticKind::kSkewed: {
      const double v = y - x[0] + kSkewMean;
      if (v <= 0.0) return 0.0;
      return normal_cdf(2.0 * std::log(v));
    }
    case SyntheticKind::kBimodal: {
      const double p = sigmoid(2.0 * x[1]);
      return p * normal_cdf((y - x[0] - kBimodalShift) / kBimodalScale) +
             (1.0 - p) * normal_cdf((y - x[0] + kBimodalShift) / kBimodalScale);
    }
  }
  return 0.0;
}

double SyntheticLaw::quantile(double tau, std::span<const double> x) const {
  if (!(tau > 0.0 && tau < 1.0)) throw DomainError("SyntheticLaw::quantile: tau outside (0, 1)");
  if (x.size() < 2) throw DimensionError("SyntheticLaw: need two inputs");
  switch (kind_) {
    case SyntheticKind::kHeteroGaussian:
      return x[0] + (1.0 + std::abs(x[1])) * normal_quantile(tau);
    case SyntheticKind::kSkewed:
      return x[0] + std::exp(0.5 * normal_quantile(tau)) - kSkewMean;
    case SyntheticKind::kBimodal:
      break;
  }
  // Mixture CDF has no closed-form inverse. The component quantiles bracket
  // the mixture quantile; Newton steps that leave the bracket fall back to
  // bisection.
  const double z = normal_quantile(tau);
  const double p = sigmoid(2.0 * x[1]);
  double lo = x[0] - kBimodalShift + kBimodalScale * z - 1e-9;
  double hi = x[0] + kBimodalShift + kBimodalScale * z + 1e-9;
  double y = 0.5 * (lo + hi);
  for (int it = 0; it < 200; ++it) {
    const double f = cdf(y, x) - tau;
    if (f == 0.0) return y;
    if (f < 0.0) {
      lo = y;
    } else {
      hi = y;
    }
    const double density = (p * normal_pdf((y - x[0] - kBimodalShift) / kBimodalScale) +
                            (1.0 - p) * normal_pdf((y - x[0] + kBimodalShift) / kBimodalScale)) /
                           kBimodalScale;
    double next = density > 0.0 ? y - f / density : lo;
    if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
    if (next == y || hi - lo <= 4.0 * std::numeric_limits<double>::epsilon() * std::abs(y)) {
      return next;
    }
    y = next;
  }
  return y;
}

Dataset synthesize(SyntheticKind kind, std::size_t n, std::uint64_t seed) {
  if (n < kMinRows) throw DataError("synthesize: need at least " + std::to_string(kMinRows) + " rows");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> ux(-2.0, 2.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  Dataset ds;
  ds.features = Matrix(n, 2);
  ds.labels.resize(n);
  ds.feature_names = {"x1", "x2"};
  ds.label_name = "y";
  ds.source = std::string("synthetic:") + to_string(kind) + ":n=" + std::to_string(n) +
              ":seed=" + std::to_string(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const double x1 = ux(rng);
    const double x2 = ux(rng);
    const double eps = normal(rng);
    double y = 0.0;
    switch (kind) {
      case SyntheticKind::kHeteroGaussian:
        y = x1 + (1.0 + std::abs(x2)) * eps;
        break;
      case SyntheticKind::kSkewed:
        y = x1 + std::exp(0.5 * eps) - kSkewMean;
        break;
      case SyntheticKind::kBimodal: {
        const double s = unit(rng) < sigmoid(2.0 * x2) ? 1.0 : -1.0;
        y = x1 + kBimodalShift * s + kBimodalScale * eps;
        break;
      }
    }
    ds.features(i, 0) = x1;
    ds.features(i, 1) = x2;
    ds.labels[i] = y;
  }
  return ds;
}

}  // namespace emq::data
