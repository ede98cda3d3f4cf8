#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "emq/data.hpp"
#include "emq/matrix.hpp"
#include "emq/nn.hpp"
#include "emq/quantile.hpp"

namespace emq {

// Features/labels of a split, already standardized.
struct TrainingData {
  Matrix x_train;
  std::vector<double> y_train;
  Matrix x_val;
  std::vector<double> y_val;

  static TrainingData from(const data::Dataset& train, const data::Dataset& val);
};

enum class Variant { kEmq0, kEmq, kEmqw };

const char* to_string(Variant variant);
Variant variant_from_string(const std::string& name);

struct GaussianHeadOutput {
  double mu = 0.0;
  double sigma = 1.0;
};

// Floor added to the softplus scale output of the initial network.
inline constexpr double kSigmaFloor = 1e-6;
// Largest |lambda| the ensemble step uses; tanh rounds to exactly +-1 for large
// arguments, which would let neighbouring quantiles meet.
inline constexpr double kLambdaLimit = 1.0 - 1e-9;

struct EnsembleStepConfig {
  // Stand-in for the infinite ends of the support, in standardized label units.
  double boundary_B = 10.0;
  std::vector<std::size_t> weak_hidden_sizes = {16, 8};

  void validate() const;
};

struct AdaptiveTConfig {
  std::size_t t_max = 40;
  std::size_t t1 = 10;
  std::size_t t2 = 5;

  void validate() const;
};

// q_k = mu + sigma * Phi^-1(tau_k)
std::vector<double> gaussian_head_quantiles(double mu, double sigma, const QuantileGrid& grid);

// lambda_k = tanh(a0 + a1 tau_k + a2 tau_k^2 + a3 tau_k^3), limited to
// +-kLambdaLimit.
std::vector<double> lambda_head(const std::array<double, 4>& coeffs, const QuantileGrid& grid);

// g(lambda) = r lambda for lambda > 0 and -l lambda otherwise, defined on
// [-1, 1]; l and r are the signed half-gaps to the left and right neighbours
// (l <= 0 <= r).
double g_function(double lambda, double left_half_gap, double right_half_gap);

// Moves every q_k towards the midpoint with its right neighbour (lambda > 0)
// or its left neighbour (lambda < 0); lambda = 0 leaves it in place. The
// virtual neighbours outside the fan are -B and +B.
std::vector<double> g_transform(std::span<const double> q_prev, std::span<const double> lambdas,
                                double boundary_B);

// Left/right virtual neighbours used by g_transform: -B and +B, or q_1 - B /
// q_K + B when the fan itself reaches the boundary.
std::pair<double, double> virtual_endpoints(std::span<const double> q_prev, double boundary_B);

struct AdaptiveDecision {
  bool stop = false;
  // Step at which the rule fired (valid when stop is true).
  std::size_t t_prime = 0;
};

// Evaluates the stopping rule at t = e_history.size() - 1: stop iff t >= t1 and
// the mean of the last t2 errors exceeds the mean of the t1 - t2 before them.
AdaptiveDecision adaptive_stop_check(std::span<const double> e_history, std::size_t t1,
                                     std::size_t t2);

// Smallest index of the minimum of e[0..t_prime].
std::size_t adaptive_argmin(std::span<const double> e_history, std::size_t t_prime);

// Multi-quantile loss of the initial step as a function of the two raw network
// outputs (mu, softplus scale).
class InitialStepLoss {
 public:
  InitialStepLoss(const QuantileGrid& grid, std::span<const double> y,
                  const LossWeights* weights);
  double operator()(const Matrix& outputs, std::span<const std::size_t> rows, Matrix* grad) const;

 private:
  const QuantileGrid& grid_;
  std::span<const double> y_;
  const LossWeights* weights_;
};

// Multi-quantile loss of one ensemble step as a function of the four
// polynomial coefficients, with the previous fans held fixed.
class EnsembleStepLoss {
 public:
  EnsembleStepLoss(const QuantileGrid& grid, std::span<const double> y, const Matrix& q_prev,
                   double boundary_B, const LossWeights* weights);
  double operator()(const Matrix& outputs, std::span<const std::size_t> rows, Matrix* grad) const;

 private:
  const QuantileGrid& grid_;
  std::span<const double> y_;
  const Matrix& q_prev_;
  double boundary_B_;
  const LossWeights* weights_;
};

struct EmqModel {
  QuantileGrid grid = QuantileGrid::percent99();
  Variant variant = Variant::kEmq;
  nn::Mlp f0;
  std::vector<nn::Mlp> weak_learners;
  EnsembleStepConfig step_config;
  AdaptiveTConfig adaptive_config;
  data::NormStats norm_stats;
  // Validation ECE after every explored step (e_0 ... e_{t'}).
  std::vector<double> ece_trace;
  // Step at which exploration ended (rule fired or T_max reached).
  std::size_t stop_step = 0;
  bool stopped_early = false;
  // Free-form provenance (config hash, seed, ...) stored in the header.
  std::map<std::string, std::string> metadata;

  std::size_t t_ada() const { return weak_learners.size(); }
  std::size_t input_dim() const { return f0.input_dim(); }
};

struct EmqFitOptions {
  nn::TrainConfig train;
  EnsembleStepConfig step;
  AdaptiveTConfig adaptive;
  Variant variant = Variant::kEmq;
  QuantileGrid grid = QuantileGrid::percent99();
};

// Initial network: hidden [8, 16, 4] x d, tanh, outputs (mu, softplus scale).
nn::MlpShape initial_shape(std::size_t input_dim);
// Weak learner: hidden sizes from the step config, tanh, four linear outputs.
nn::MlpShape weak_shape(std::size_t input_dim, const EnsembleStepConfig& cfg);

nn::Mlp fit_initial(const TrainingData& data, const nn::TrainConfig& cfg, const QuantileGrid& grid,
                    const LossWeights* weights, nn::TrainRecord* record = nullptr);

// Trains F_t against the cached fans of step t-1. `seed` initializes the
// network and the batch order.
nn::Mlp fit_ensemble_step(const TrainingData& data, const Matrix& q_prev_train,
                          const Matrix& q_prev_val, const nn::TrainConfig& cfg,
                          const EnsembleStepConfig& step, const QuantileGrid& grid,
                          const LossWeights* weights, std::uint64_t seed,
                          nn::TrainRecord* record = nullptr);

// Gaussian fans for every row of `x` from the initial network.
Matrix initial_fans(const nn::Mlp& f0, const Matrix& x, const QuantileGrid& grid);
// Applies one weak learner to the fans of the previous step.
Matrix apply_step(const nn::Mlp& learner, const Matrix& x, const Matrix& q_prev,
                  const QuantileGrid& grid, double boundary_B);

EmqModel fit_emq(const TrainingData& data, const EmqFitOptions& options);

// Fans after the initial step and the first `steps` weak learners (all of them
// by default). Inputs must be standardized with model.norm_stats.
Matrix predict_quantiles(const EmqModel& model, const Matrix& x,
                         std::optional<std::size_t> steps = std::nullopt);

inline constexpr char kEmqMagic[] = "EMQM";

void save_model(const EmqModel& model, const std::filesystem::path& path);
EmqModel load_model(const std::filesystem::path& path);

// Throws NumericError unless every row is strictly increasing.
void check_monotone(const Matrix& fans, const char* context);

}  // namespace emq
