#include "emq/baselines.hpp"

#include <algorithm>

#include "emq/container.hpp"
#include "emq/error.hpp"

namespace emq::baselines {
namespace {

void check_data(const TrainingData& data) {
  if (data.x_train.rows() == 0 || data.x_val.rows() == 0) {
    throw DataError("baseline: empty training or validation set");
  }
  if (data.y_train.size() != data.x_train.rows() || data.y_val.size() != data.x_val.rows()) {
    throw DimensionError("baseline: feature/label row counts differ");
  }
}

template <typename Loss>
DirectQuantileModel fit_direct(const TrainingData& data, const nn::TrainConfig& cfg,
                               const QuantileGrid& grid, LossKind kind, const Loss& train_loss,
                               const Loss& val_loss) {
  DirectQuantileModel model;
  model.grid = grid;
  model.loss = kind;
  model.mlp = nn::mlp_init(direct_shape(data.x_train.cols(), grid.size()), cfg.seed);
  nn::train_with_early_stopping(model.mlp, data.x_train, train_loss, data.x_val, val_loss, cfg);
  return model;
}

}  // namespace

const char* to_string(LossKind kind) {
  switch (kind) {
    case LossKind::kVanilla:
      return "vanilla-qr";
    case LossKind::kWeighted:
      return "qrw";
    case LossKind::kIntervalScore:
      return "interval-score";
  }
  return "unknown";
}

LossKind loss_kind_from_string(const std::string& name) {
  if (name == "vanilla-qr") return LossKind::kVanilla;
  if (name == "qrw") return LossKind::kWeighted;
  if (name == "interval-score") return LossKind::kIntervalScore;
  throw ConfigError("unknown baseline '" + name + "'");
}

nn::MlpShape direct_shape(std::size_t input_dim, std::size_t k) {
  return nn::make_shape({input_dim, 8 * input_dim, 16 * input_dim, 4 * input_dim, k},
                        nn::Activation::kRelu);
}

QuantileLoss::QuantileLoss(const QuantileGrid& grid, std::span<const double> y,
                           const LossWeights* weights)
    : grid_(grid), y_(y), weights_(weights) {
  if (weights_ && weights_->values.size() != grid_.size()) {
    throw DimensionError("QuantileLoss: weight vector does not match grid");
  }
}

double QuantileLoss::operator()(const Matrix& outputs, std::span<const std::size_t> rows,
                                Matrix* grad) const {
  const auto& tau = grid_.levels();
  const double inv_n = 1.0 / static_cast<double>(rows.size());
  double total = 0.0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double y = y_[rows[i]];
    auto q = outputs.row(i);
    for (std::size_t k = 0; k < tau.size(); ++k) {
      const double w = weights_ ? weights_->values[k] : 1.0;
      const double below = y < q[k] ? 1.0 : 0.0;
      total += w * (y - q[k]) * (tau[k] - below);
      if (grad) (*grad)(i, k) = w * (below - tau[k]) * inv_n;
    }
  }
  return total * inv_n;
}

IntervalScoreLoss::IntervalScoreLoss(const QuantileGrid& grid, std::span<const double> y)
    : grid_(grid), y_(y), pairs_(grid.centered_pairs()) {
  const auto median = grid.find(0.5);
  if (grid.size() % 2 == 0 || !median) {
    throw ConfigError("interval score: grid must be symmetric with odd K (median present)");
  }
  median_ = *median;
}

double IntervalScoreLoss::operator()(const Matrix& outputs, std::span<const std::size_t> rows,
                                     Matrix* grad) const {
  const double inv_n = 1.0 / static_cast<double>(rows.size());
  const double inv_p = 1.0 / static_cast<double>(pairs_.size());
  double total = 0.0;
  if (grad) grad->fill(0.0);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double y = y_[rows[i]];
    auto q = outputs.row(i);
    double row_score = 0.0;
    for (auto [lo, hi] : pairs_) {
      const double alpha = 2.0 * grid_[lo];
      const double l = q[lo];
      const double u = q[hi];
      double score = u - l;
      double d_l = -1.0;
      double d_u = 1.0;
      if (y < l) {
        score += (2.0 / alpha) * (l - y);
        d_l += 2.0 / alpha;
      }
      if (y > u) {
        score += (2.0 / alpha) * (y - u);
        d_u -= 2.0 / alpha;
      }
      row_score += score;
      if (grad) {
        (*grad)(i, lo) += d_l * inv_p * inv_n;
        (*grad)(i, hi) += d_u * inv_p * inv_n;
      }
    }
    const double qm = q[median_];
    const double below = y < qm ? 1.0 : 0.0;
    total += row_score * inv_p + (y - qm) * (0.5 - below);
    if (grad) (*grad)(i, median_) += (below - 0.5) * inv_n;
  }
  return total * inv_n;
}

DirectQuantileModel fit_vanilla_qr(const TrainingData& data, const nn::TrainConfig& cfg,
                                   const QuantileGrid& grid) {
  check_data(data);
  const QuantileLoss train_loss(grid, data.y_train, nullptr);
  const QuantileLoss val_loss(grid, data.y_val, nullptr);
  return fit_direct(data, cfg, grid, LossKind::kVanilla, train_loss, val_loss);
}

DirectQuantileModel fit_weighted_qr(const TrainingData& data, const nn::TrainConfig& cfg,
                                    const QuantileGrid& grid, const LossWeights& weights) {
  check_data(data);
  const QuantileLoss train_loss(grid, data.y_train, &weights);
  const QuantileLoss val_loss(grid, data.y_val, &weights);
  return fit_direct(data, cfg, grid, LossKind::kWeighted, train_loss, val_loss);
}

DirectQuantileModel fit_qrw(const TrainingData& data, const nn::TrainConfig& cfg,
                            const QuantileGrid& grid) {
  return fit_weighted_qr(data, cfg, grid, emqw_weights(grid));
}

DirectQuantileModel fit_interval_score_model(const TrainingData& data, const nn::TrainConfig& cfg,
                                             const QuantileGrid& grid) {
  check_data(data);
  const IntervalScoreLoss train_loss(grid, data.y_train);
  const IntervalScoreLoss val_loss(grid, data.y_val);
  return fit_direct(data, cfg, grid, LossKind::kIntervalScore, train_loss, val_loss);
}

Matrix predict(const DirectQuantileModel& model, const Matrix& x, bool sort_rows) {
  if (x.cols() != model.input_dim()) {
    throw DimensionError("baseline predict: inputs have " + std::to_string(x.cols()) +
                         " columns, model expects " + std::to_string(model.input_dim()));
  }
  Matrix out = model.mlp.forward(x);
  if (sort_rows) {
    for (std::size_t i = 0; i < out.rows(); ++i) {
      auto row = out.row(i);
      std::sort(row.begin(), row.end());
    }
  }
  return out;
}

void save_model(const DirectQuantileModel& model, const std::filesystem::path& path) {
  nlohmann::json header;
  std::vector<double> payload;
  header["type"] = kDirectMagic;
  header["loss"] = to_string(model.loss);
  header["grid"] = model.grid.levels();
  header["norm_stats"] = io::to_json(model.norm_stats);
  header["metadata"] = model.metadata;
  header["network"] = io::write_mlp(model.mlp, payload);
  io::write_container(path, kDirectMagic, header, payload);
}

DirectQuantileModel load_model(const std::filesystem::path& path) {
  const io::Container c = io::read_container(path, kDirectMagic);
  try {
    const auto& h = c.header;
    DirectQuantileModel model;
    model.loss = loss_kind_from_string(h.at("loss").get<std::string>());
    model.grid = QuantileGrid(h.at("grid").get<std::vector<double>>());
    model.norm_stats = io::norm_stats_from_json(h.at("norm_stats"));
    model.metadata = h.at("metadata").get<std::map<std::string, std::string>>();
    std::size_t offset = 0;
    model.mlp = io::read_mlp(h.at("network"), c.payload, offset);
    if (offset != c.payload.size()) throw FormatError("model container: trailing parameter data");
    if (model.mlp.output_dim() != model.grid.size()) {
      throw FormatError("model container: network output does not match grid");
    }
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model container: bad header: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("model container: ") + e.what());
  }
}

}  // namespace emq::baselines
