#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "emq/data.hpp"
#include "emq/metrics.hpp"
#include "emq/model.hpp"
#include "emq/nn.hpp"

// Run configuration and the commands behind the `emq` executable.
namespace emq::app {

inline constexpr char kToolVersion[] = "1.0.0";
inline constexpr char kOutputRootEnv[] = "EMQ_OUTPUT_ROOT";

// Every model family the driver can train.
inline const std::vector<std::string> kVariantNames = {"emq0",       "emq", "emqw",
                                                       "vanilla-qr", "qrw", "interval-score"};

bool is_emq_variant(const std::string& name);

// Where the rows come from: a CSV path or "synthetic:<kind>:n=<rows>:seed=<seed>".
struct DataSpec {
  std::string source;
  // Label column for CSV input: a header name, or a zero-based index written
  // as digits.
  std::string label;
  bool header = true;

  bool is_synthetic() const;
  void validate() const;
};

data::Dataset load_dataset(const DataSpec& spec);

struct RunConfig {
  DataSpec data;
  std::vector<std::string> variants = {"emq"};
  std::string grid = "percent99";
  nn::TrainConfig train;
  EnsembleStepConfig step;
  AdaptiveTConfig adaptive;
  std::vector<std::uint64_t> seeds = {0};
  double test_fraction = 0.2;
  // Empty means <$EMQ_OUTPUT_ROOT or "runs">/<run name>.
  std::string output_dir;
  // Baseline fans are evaluated as produced; this sorts each row first.
  bool sort_baseline_quantiles = false;

  // Field-level ConfigError on the first violated constraint.
  void validate() const;
  QuantileGrid parsed_grid() const;
};

// Unknown keys and type mismatches are ConfigErrors naming the field.
RunConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const RunConfig& config);
RunConfig load_config(const std::filesystem::path& path);

// Hash of the configuration of one (variant, seed) cell; the output directory
// and the other cells do not enter it.
std::string cell_config_hash(const RunConfig& config, const std::string& variant,
                             std::uint64_t seed);

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);
std::string dataset_hash(const data::Dataset& dataset);
std::string split_hash(const data::SplitIndices& indices);
nlohmann::json split_to_json(const data::SplitIndices& indices);

std::filesystem::path default_output_root();

struct TrainOutcome {
  std::filesystem::path run_dir;
  std::string config_hash;
  std::string split_hash;
  std::string manifest_hash;
  metrics::EvalReport report;
  // Empty for baselines.
  std::vector<double> ece_trace;
  std::size_t t_ada = 0;
  std::size_t stop_step = 0;
};

// Splits, standardizes, trains one (variant, seed) cell, evaluates it on the
// test rows and writes manifest.json, model.emqm, trace.csv, report.json and
// report.csv into `run_dir`. On failure a FAILED marker holding the error is
// left in the directory and the exception is rethrown.
TrainOutcome cmd_train(const RunConfig& config, const std::string& variant, std::uint64_t seed,
                       const std::filesystem::path& run_dir);

struct EvaluateOptions {
  std::filesystem::path model_path;
  DataSpec data;
  // Manifest written next to the model by default.
  std::optional<std::filesystem::path> manifest_path;
  // test | val | train | all
  std::string rows = "test";
  bool allow_train_eval = false;
  std::optional<std::filesystem::path> output_dir;
};

struct EvaluateOutcome {
  metrics::EvalReport report;
  std::filesystem::path json_path;
  std::filesystem::path csv_path;
};

EvaluateOutcome cmd_evaluate(const EvaluateOptions& options);

struct BenchmarkCell {
  std::string variant;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  TrainOutcome outcome;
};

struct BenchmarkOutcome {
  std::vector<BenchmarkCell> cells;
  std::filesystem::path aggregate_path;
  std::filesystem::path cells_path;
  std::size_t failures = 0;
};

// Trains every (variant, seed) cell into <output>/<variant>-seed<seed>. Cells
// run on up to `jobs` threads; a failed cell is recorded and the rest go on.
BenchmarkOutcome cmd_benchmark(const RunConfig& config, const std::filesystem::path& output_dir,
                               std::size_t jobs);

struct DensityOptions {
  std::filesystem::path model_path;
  DataSpec data;
  std::vector<std::size_t> rows;
  std::filesystem::path output_path;
};

// One CSV line per (row, curve, cell) in standardized label units; curve is
// "t0" (initial Gaussian fan) or "final".
void cmd_density(const DensityOptions& options);

struct WeightRow {
  double tau = 0.0;
  double weight = 0.0;
  std::optional<double> monte_carlo;
};

// Monte-Carlo estimate of the weights: 1 / E[pinball_tau(Z, Phi^-1(tau))],
// Z ~ N(0, 1), with one shared sample for all levels.
std::vector<double> monte_carlo_weights(const QuantileGrid& grid, std::size_t draws,
                                        std::uint64_t seed);

std::vector<WeightRow> cmd_weights(const QuantileGrid& grid, bool verify, std::size_t draws,
                                   std::uint64_t seed);
std::string weights_to_csv(const std::vector<WeightRow>& rows);

}  // namespace emq::app
