#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>

#include "emq/data.hpp"
#include "emq/model.hpp"
#include "emq/nn.hpp"
#include "emq/quantile.hpp"

// Direct quantile regressors: one network emitting all K quantiles, with no
// monotonicity constraint.
namespace emq::baselines {

enum class LossKind { kVanilla, kWeighted, kIntervalScore };

const char* to_string(LossKind kind);
LossKind loss_kind_from_string(const std::string& name);

struct DirectQuantileModel {
  nn::Mlp mlp;
  QuantileGrid grid = QuantileGrid::percent99();
  LossKind loss = LossKind::kVanilla;
  data::NormStats norm_stats;
  std::map<std::string, std::string> metadata;

  std::size_t input_dim() const { return mlp.input_dim(); }
};

// hidden [8, 16, 4] x d, relu, K linear outputs.
nn::MlpShape direct_shape(std::size_t input_dim, std::size_t k);

// Weighted multi-quantile loss on raw network outputs (unit weights when null).
class QuantileLoss {
 public:
  QuantileLoss(const QuantileGrid& grid, std::span<const double> y, const LossWeights* weights);
  double operator()(const Matrix& outputs, std::span<const std::size_t> rows, Matrix* grad) const;

 private:
  const QuantileGrid& grid_;
  std::span<const double> y_;
  const LossWeights* weights_;
};

// Mean interval score over the centered pairs (pair k scored at level 2 tau_k)
// plus the pinball loss of the median output.
class IntervalScoreLoss {
 public:
  IntervalScoreLoss(const QuantileGrid& grid, std::span<const double> y);
  double operator()(const Matrix& outputs, std::span<const std::size_t> rows, Matrix* grad) const;

 private:
  const QuantileGrid& grid_;
  std::span<const double> y_;
  std::vector<std::pair<std::size_t, std::size_t>> pairs_;
  std::size_t median_;
};

DirectQuantileModel fit_vanilla_qr(const TrainingData& data, const nn::TrainConfig& cfg,
                                   const QuantileGrid& grid);
DirectQuantileModel fit_qrw(const TrainingData& data, const nn::TrainConfig& cfg,
                            const QuantileGrid& grid);
// QRW with caller-supplied weights (the grid's emqw_weights in fit_qrw).
DirectQuantileModel fit_weighted_qr(const TrainingData& data, const nn::TrainConfig& cfg,
                                    const QuantileGrid& grid, const LossWeights& weights);
// Requires a symmetric grid with odd K.
DirectQuantileModel fit_interval_score_model(const TrainingData& data, const nn::TrainConfig& cfg,
                                             const QuantileGrid& grid);

// Raw network outputs; rows may cross. With `sort_rows`, each row is sorted
// ascending (ablation only).
Matrix predict(const DirectQuantileModel& model, const Matrix& x, bool sort_rows = false);

inline constexpr char kDirectMagic[] = "DQM1";

void save_model(const DirectQuantileModel& model, const std::filesystem::path& path);
DirectQuantileModel load_model(const std::filesystem::path& path);

}  // namespace emq::baselines
