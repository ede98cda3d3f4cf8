#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "emq/matrix.hpp"

namespace emq::data {

struct Dataset {
  Matrix features;
  std::vector<double> labels;
  std::vector<std::string> feature_names;
  std::string label_name;
  std::string source;
  // Rows discarded during ingestion because of missing values.
  std::size_t dropped_rows = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return features.cols(); }
};

inline constexpr std::size_t kMinRows = 10;

// Label selected by header name or by zero-based column index.
using LabelColumn = std::variant<std::string, std::size_t>;

// Reads a numeric CSV. Rows with empty/NaN/NA/? fields are dropped and
// counted; any other non-numeric field is an error naming its column.
Dataset load_csv(const std::filesystem::path& path, const LabelColumn& label, bool header = true);

Dataset subset(const Dataset& dataset, std::span<const std::size_t> rows);

// Mean/std (divisor n-1) of every kept feature column and of the label.
struct NormStats {
  std::vector<std::size_t> kept_features;
  std::vector<double> feature_mean;
  std::vector<double> feature_std;
  double label_mean = 0.0;
  double label_std = 1.0;

  std::size_t input_dim() const { return kept_features.size(); }

  Dataset apply(const Dataset& dataset) const;
  // Standardizes a raw feature matrix (all original columns).
  Matrix apply_features(const Matrix& raw) const;
  double label_to_raw(double normalized) const { return normalized * label_std + label_mean; }
  std::vector<double> labels_to_raw(std::span<const double> normalized) const;
  Matrix features_to_raw(const Matrix& normalized) const;

  bool operator==(const NormStats&) const = default;
};

// Statistics from `train` only; constant feature columns are dropped with a
// warning, a constant label is an error.
NormStats fit_norm_stats(const Dataset& train);

struct Standardized {
  NormStats stats;
  std::vector<Dataset> datasets;
};

Standardized standardize(const Dataset& train, std::span<const Dataset> apply_to);

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;

  bool operator==(const SplitIndices&) const = default;
};

// Seeded uniform permutation: round(n * test_fraction) rows go to test, then
// round(|rest| * val_fraction) of the remainder to validation. Each index list
// is sorted ascending.
SplitIndices split(std::size_t n, double test_fraction, double val_fraction, std::uint64_t seed);

// Datasets of one split, standardized with statistics of train + val (the
// whole training portion).
struct PreparedSplit {
  NormStats stats;
  Dataset train;
  Dataset val;
  Dataset test;
};

PreparedSplit prepare(const Dataset& dataset, const SplitIndices& indices);

enum class SyntheticKind { kHeteroGaussian, kSkewed, kBimodal };

SyntheticKind synthetic_kind_from_string(const std::string& name);
const char* to_string(SyntheticKind kind);

// Conditional law of a synthetic generator; x is the two-dimensional input.
class SyntheticLaw {
 public:
  explicit SyntheticLaw(SyntheticKind kind) : kind_(kind) {}

  SyntheticKind kind() const { return kind_; }
  double cdf(double y, std::span<const double> x) const;
  double quantile(double tau, std::span<const double> x) const;

 private:
  SyntheticKind kind_;
};

// x ~ U(-2, 2)^2 and
//   hetero-gaussian: y = x1 + (1 + |x2|) eps
//   skewed:          y = x1 + exp(eps / 2) - E[exp(eps / 2)]
//   bimodal:         y = x1 + 2 s + 0.3 eps, P(s = +1) = sigmoid(2 x2)
// with eps ~ N(0, 1).
Dataset synthesize(SyntheticKind kind, std::size_t n, std::uint64_t seed);

}  // namespace emq::data
