#include "emq/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "emq/container.hpp"
#include "emq/error.hpp"
#include "emq/log.hpp"
#include "emq/metrics.hpp"

namespace emq {
namespace {

constexpr std::size_t kCoeffCount = 4;

// Piecewise-linear g: slope r on (0, 1], slope -l on [-1, 0]. The lambda <= 0
// branch also supplies the derivative at exactly zero.
double g_slope(double lambda, double left_half_gap, double right_half_gap) {
  return lambda > 0.0 ? right_half_gap : -left_half_gap;
}

double clamp_lambda(double lambda) { return std::clamp(lambda, -kLambdaLimit, kLambdaLimit); }

double poly(std::span<const double> a, double tau) {
  return a[0] + tau * (a[1] + tau * (a[2] + tau * a[3]));
}

// One ensemble step for a single fan; when dq_dz is non-null it receives
// d(q^t_k)/d(z_k) with z_k the cubic before tanh.
void step_fan(std::span<const double> q_prev, std::span<const double> coeffs,
              const QuantileGrid& grid, double boundary_B, std::span<double> out,
              std::span<double> dq_dz = {}) {
  const std::size_t K = q_prev.size();
  const auto [lo, hi] = virtual_endpoints(q_prev, boundary_B);
  for (std::size_t k = 0; k < K; ++k) {
    const double left = k == 0 ? lo : q_prev[k - 1];
    const double right = k + 1 == K ? hi : q_prev[k + 1];
    const double l = (left - q_prev[k]) / 2.0;
    const double r = (right - q_prev[k]) / 2.0;
    const double raw = std::tanh(poly(coeffs, grid[k]));
    const double lambda = clamp_lambda(raw);
    const double slope = g_slope(lambda, l, r);
    out[k] = q_prev[k] + slope * lambda;
    if (!dq_dz.empty()) dq_dz[k] = lambda == raw ? slope * (1.0 - raw * raw) : 0.0;
  }
}

std::string describe_row(const char* context, std::size_t row, std::size_t k) {
  std::ostringstream msg;
  msg << context << ": quantile fan of row " << row << " is not strictly increasing at level "
      << k;
  return msg.str();
}

void warn_if_beyond_boundary(const Matrix& fans, double boundary_B, const char* context) {
  std::size_t count = 0;
  double worst = 0.0;
  for (double q : fans.values()) {
    if (std::abs(q) >= boundary_B) {
      ++count;
      worst = std::max(worst, std::abs(q));
    }
  }
  if (count > 0) {
    std::ostringstream msg;
    msg << context << ": " << count << " quantiles reach |q| >= B=" << boundary_B
        << " (max " << worst << "); consider a larger boundary";
    log::warn(msg.str());
  }
}

}  // namespace

TrainingData TrainingData::from(const data::Dataset& train, const data::Dataset& val) {
  return {train.features, train.labels, val.features, val.labels};
}

const char* to_string(Variant variant) {
  switch (variant) {
    case Variant::kEmq0:
      return "emq0";
    case Variant::kEmq:
      return "emq";
    case Variant::kEmqw:
      return "emqw";
  }
  return "unknown";
}

Variant variant_from_string(const std::string& name) {
  if (name == "emq0") return Variant::kEmq0;
  if (name == "emq") return Variant::kEmq;
  if (name == "emqw") return Variant::kEmqw;
  throw ConfigError("unknown EMQ variant '" + name + "'");
}

void EnsembleStepConfig::validate() const {
  if (!(boundary_B > 0.0) || !std::isfinite(boundary_B)) {
    throw ConfigError("ensemble step: boundary_B must be a positive finite number");
  }
  if (weak_hidden_sizes.empty()) throw ConfigError("ensemble step: need at least one hidden layer");
  for (auto s : weak_hidden_sizes) {
    if (s == 0) throw ConfigError("ensemble step: hidden sizes must be positive");
  }
}

void AdaptiveTConfig::validate() const {
  if (t2 < 1 || t1 <= t2) throw ConfigError("adaptive T: need t1 > t2 >= 1");
}

std::vector<double> gaussian_head_quantiles(double mu, double sigma, const QuantileGrid& grid) {
  if (!(sigma > 0.0)) throw DomainError("gaussian_head_quantiles: sigma must be positive");
  std::vector<double> q;
  q.reserve(grid.size());
  for (double z : grid.normal_scores()) q.push_back(mu + sigma * z);
  return q;
}

std::vector<double> lambda_head(const std::array<double, 4>& coeffs, const QuantileGrid& grid) {
  std::vector<double> lambdas;
  lambdas.reserve(grid.size());
  for (double tau : grid.levels()) lambdas.push_back(clamp_lambda(std::tanh(poly(coeffs, tau))));
  return lambdas;
}

double g_function(double lambda, double left_half_gap, double right_half_gap) {
  if (!(std::abs(lambda) <= 1.0)) throw DomainError("g_function: lambda outside [-1, 1]");
  return g_slope(lambda, left_half_gap, right_half_gap) * lambda;
}

std::pair<double, double> virtual_endpoints(std::span<const double> q_prev, double boundary_B) {
  if (q_prev.empty()) throw DimensionError("virtual_endpoints: empty fan");
  const double lo = q_prev.front() > -boundary_B ? -boundary_B : q_prev.front() - boundary_B;
  const double hi = q_prev.back() < boundary_B ? boundary_B : q_prev.back() + boundary_B;
  return {lo, hi};
}

std::vector<double> g_transform(std::span<const double> q_prev, std::span<const double> lambdas,
                                double boundary_B) {
  if (q_prev.size() != lambdas.size()) {
    throw DimensionError("g_transform: fan and lambda sizes differ");
  }
  if (!(boundary_B > 0.0)) throw DomainError("g_transform: boundary must be positive");
  for (std::size_t k = 0; k < q_prev.size(); ++k) {
    if (!(std::abs(lambdas[k]) < 1.0)) {
      throw DomainError("g_transform: lambda_" + std::to_string(k) + " outside (-1, 1)");
    }
    if (k > 0 && !(q_prev[k] > q_prev[k - 1])) {
      throw NumericError(describe_row("g_transform", 0, k));
    }
  }
  const auto [lo, hi] = virtual_endpoints(q_prev, boundary_B);
  if (lo != -boundary_B || hi != boundary_B) {
    log::warn("g_transform: fan reaches the boundary B; virtual endpoints moved outward");
  }
  std::vector<double> out(q_prev.size());
  const std::size_t K = q_prev.size();
  for (std::size_t k = 0; k < K; ++k) {
    const double left = k == 0 ? lo : q_prev[k - 1];
    const double right = k + 1 == K ? hi : q_prev[k + 1];
    const double l = (left - q_prev[k]) / 2.0;
    const double r = (right - q_prev[k]) / 2.0;
    out[k] = q_prev[k] + g_slope(lambdas[k], l, r) * lambdas[k];
  }
  return out;
}

AdaptiveDecision adaptive_stop_check(std::span<const double> e_history, std::size_t t1,
                                     std::size_t t2) {
  if (t2 < 1 || t1 <= t2) throw ConfigError("adaptive_stop_check: need t1 > t2 >= 1");
  if (e_history.empty()) throw DataError("adaptive_stop_check: empty error history");
  const std::size_t t = e_history.size() - 1;
  if (t < t1) return {};
  // Recent window e[t-t2+1 .. t], older window e[t-t1+1 .. t-t2].
  double recent = 0.0;
  for (std::size_t i = t - t2 + 1; i <= t; ++i) recent += e_history[i];
  recent /= static_cast<double>(t2);
  double older = 0.0;
  for (std::size_t i = t - t1 + 1; i <= t - t2; ++i) older += e_history[i];
  older /= static_cast<double>(t1 - t2);
  if (recent > older) return {true, t};
  return {};
}

std::size_t adaptive_argmin(std::span<const double> e_history, std::size_t t_prime) {
  if (t_prime >= e_history.size()) throw DimensionError("adaptive_argmin: t' beyond history");
  std::size_t best = 0;
  for (std::size_t t = 1; t <= t_prime; ++t) {
    if (e_history[t] < e_history[best]) best = t;
  }
  return best;
}

InitialStepLoss::InitialStepLoss(const QuantileGrid& grid, std::span<const double> y,
                                 const LossWeights* weights)
    : grid_(grid), y_(y), weights_(weights) {}

double InitialStepLoss::operator()(const Matrix& outputs, std::span<const std::size_t> rows,
                                   Matrix* grad) const {
  const auto& tau = grid_.levels();
  const auto& z = grid_.normal_scores();
  const std::size_t K = tau.size();
  double total = 0.0;
  const double inv_n = 1.0 / static_cast<double>(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double y = y_[rows[i]];
    const double mu = outputs(i, 0);
    const double sigma = outputs(i, 1) + kSigmaFloor;
    double d_mu = 0.0;
    double d_sigma = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      const double w = weights_ ? weights_->values[k] : 1.0;
      const double q = mu + sigma * z[k];
      const double below = y < q ? 1.0 : 0.0;
      total += w * (y - q) * (tau[k] - below);
      const double dq = w * (below - tau[k]);
      d_mu += dq;
      d_sigma += dq * z[k];
    }
    if (grad) {
      (*grad)(i, 0) = d_mu * inv_n;
      (*grad)(i, 1) = d_sigma * inv_n;
    }
  }
  return total * inv_n;
}

EnsembleStepLoss::EnsembleStepLoss(const QuantileGrid& grid, std::span<const double> y,
                                   const Matrix& q_prev, double boundary_B,
                                   const LossWeights* weights)
    : grid_(grid), y_(y), q_prev_(q_prev), boundary_B_(boundary_B), weights_(weights) {}

double EnsembleStepLoss::operator()(const Matrix& outputs, std::span<const std::size_t> rows,
                                    Matrix* grad) const {
  const auto& tau = grid_.levels();
  const std::size_t K = tau.size();
  std::vector<double> q(K);
  std::vector<double> dq_dz(K);
  double total = 0.0;
  const double inv_n = 1.0 / static_cast<double>(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double y = y_[rows[i]];
    step_fan(q_prev_.row(rows[i]), outputs.row(i), grid_, boundary_B_, q,
             grad ? std::span<double>(dq_dz) : std::span<double>());
    std::array<double, kCoeffCount> d_a{};
    for (std::size_t k = 0; k < K; ++k) {
      const double w = weights_ ? weights_->values[k] : 1.0;
      const double below = y < q[k] ? 1.0 : 0.0;
      total += w * (y - q[k]) * (tau[k] - below);
      if (grad) {
        const double dz = w * (below - tau[k]) * dq_dz[k];
        double power = 1.0;
        for (std::size_t j = 0; j < kCoeffCount; ++j) {
          d_a[j] += dz * power;
          power *= tau[k];
        }
      }
    }
    if (grad) {
      for (std::size_t j = 0; j < kCoeffCount; ++j) (*grad)(i, j) = d_a[j] * inv_n;
    }
  }
  return total * inv_n;
}

nn::MlpShape initial_shape(std::size_t input_dim) {
  return nn::make_shape({input_dim, 8 * input_dim, 16 * input_dim, 4 * input_dim, 2},
                        nn::Activation::kTanh, {false, true});
}

nn::MlpShape weak_shape(std::size_t input_dim, const EnsembleStepConfig& cfg) {
  std::vector<std::size_t> sizes{input_dim};
  sizes.insert(sizes.end(), cfg.weak_hidden_sizes.begin(), cfg.weak_hidden_sizes.end());
  sizes.push_back(kCoeffCount);
  return nn::make_shape(std::move(sizes), nn::Activation::kTanh);
}

Matrix initial_fans(const nn::Mlp& f0, const Matrix& x, const QuantileGrid& grid) {
  const Matrix out = f0.forward(x);
  const auto& z = grid.normal_scores();
  Matrix fans(x.rows(), grid.size());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const double mu = out(i, 0);
    const double sigma = out(i, 1) + kSigmaFloor;
    auto row = fans.row(i);
    for (std::size_t k = 0; k < z.size(); ++k) row[k] = mu + sigma * z[k];
  }
  return fans;
}

Matrix apply_step(const nn::Mlp& learner, const Matrix& x, const Matrix& q_prev,
                  const QuantileGrid& grid, double boundary_B) {
  if (q_prev.rows() != x.rows() || q_prev.cols() != grid.size()) {
    throw DimensionError("apply_step: previous fans do not match inputs/grid");
  }
  const Matrix coeffs = learner.forward(x);
  Matrix fans(x.rows(), grid.size());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    step_fan(q_prev.row(i), coeffs.row(i), grid, boundary_B, fans.row(i));
  }
  return fans;
}

void check_monotone(const Matrix& fans, const char* context) {
  for (std::size_t i = 0; i < fans.rows(); ++i) {
    auto q = fans.row(i);
    for (std::size_t k = 1; k < q.size(); ++k) {
      if (!(q[k] > q[k - 1])) throw NumericError(describe_row(context, i, k));
    }
  }
}

nn::Mlp fit_initial(const TrainingData& data, const nn::TrainConfig& cfg, const QuantileGrid& grid,
                    const LossWeights* weights, nn::TrainRecord* record) {
  if (data.x_train.rows() == 0 || data.x_val.rows() == 0) {
    throw DataError("fit_initial: empty training or validation set");
  }
  nn::Mlp f0 = nn::mlp_init(initial_shape(data.x_train.cols()), cfg.seed);
  const InitialStepLoss train_loss(grid, data.y_train, weights);
  const InitialStepLoss val_loss(grid, data.y_val, weights);
  auto rec = nn::train_with_early_stopping(f0, data.x_train, train_loss, data.x_val, val_loss, cfg);
  if (record) *record = std::move(rec);
  return f0;
}

nn::Mlp fit_ensemble_step(const TrainingData& data, const Matrix& q_prev_train,
                          const Matrix& q_prev_val, const nn::TrainConfig& cfg,
                          const EnsembleStepConfig& step, const QuantileGrid& grid,
                          const LossWeights* weights, std::uint64_t seed,
                          nn::TrainRecord* record) {
  step.validate();
  if (q_prev_train.rows() != data.x_train.rows() || q_prev_val.rows() != data.x_val.rows() ||
      q_prev_train.cols() != grid.size() || q_prev_val.cols() != grid.size()) {
    throw DimensionError("fit_ensemble_step: cached fans do not match the data");
  }
  nn::TrainConfig step_cfg = cfg;
  step_cfg.seed = seed;
  nn::Mlp learner = nn::mlp_init(weak_shape(data.x_train.cols(), step), seed);
  const EnsembleStepLoss train_loss(grid, data.y_train, q_prev_train, step.boundary_B, weights);
  const EnsembleStepLoss val_loss(grid, data.y_val, q_prev_val, step.boundary_B, weights);
  auto rec = nn::train_with_early_stopping(learner, data.x_train, train_loss, data.x_val, val_loss,
                                           step_cfg);
  if (record) *record = std::move(rec);
  return learner;
}

EmqModel fit_emq(const TrainingData& data, const EmqFitOptions& options) {
  options.train.validate();
  options.step.validate();
  options.adaptive.validate();
  if (data.x_train.rows() == 0 || data.x_val.rows() == 0) {
    throw DataError("fit_emq: empty training or validation set");
  }
  if (data.y_train.size() != data.x_train.rows() || data.y_val.size() != data.x_val.rows()) {
    throw DimensionError("fit_emq: feature/label row counts differ");
  }

  EmqModel model;
  model.grid = options.grid;
  model.variant = options.variant;
  model.step_config = options.step;
  model.adaptive_config = options.adaptive;
  if (options.variant == Variant::kEmq0) model.adaptive_config.t_max = 0;

  const LossWeights weights = emqw_weights(model.grid);
  const LossWeights* loss_weights = options.variant == Variant::kEmqw ? &weights : nullptr;
  const auto& grid = model.grid;
  const double B = model.step_config.boundary_B;

  model.f0 = fit_initial(data, options.train, grid, loss_weights);
  Matrix q_train = initial_fans(model.f0, data.x_train, grid);
  Matrix q_val = initial_fans(model.f0, data.x_val, grid);
  warn_if_beyond_boundary(q_train, B, "fit_emq (initial step)");

  model.ece_trace.push_back(metrics::ece(q_val, data.y_val, grid));
  std::vector<nn::Mlp> explored;
  for (std::size_t t = 1; t <= model.adaptive_config.t_max; ++t) {
    explored.push_back(fit_ensemble_step(data, q_train, q_val, options.train, model.step_config,
                                         grid, loss_weights, nn::derive_seed(options.train.seed, t)));
    q_train = apply_step(explored.back(), data.x_train, q_train, grid, B);
    q_val = apply_step(explored.back(), data.x_val, q_val, grid, B);
    check_monotone(q_train, "fit_emq (training fans)");
    check_monotone(q_val, "fit_emq (validation fans)");
    model.ece_trace.push_back(metrics::ece(q_val, data.y_val, grid));
    const auto decision =
        adaptive_stop_check(model.ece_trace, model.adaptive_config.t1, model.adaptive_config.t2);
    if (decision.stop) {
      model.stopped_early = true;
      break;
    }
  }
  model.stop_step = model.ece_trace.size() - 1;
  warn_if_beyond_boundary(q_train, B, "fit_emq (final step)");

  const std::size_t t_ada = adaptive_argmin(model.ece_trace, model.stop_step);
  explored.resize(t_ada);
  model.weak_learners = std::move(explored);
  return model;
}

Matrix predict_quantiles(const EmqModel& model, const Matrix& x, std::optional<std::size_t> steps) {
  if (x.cols() != model.input_dim()) {
    throw DimensionError("predict_quantiles: inputs have " + std::to_string(x.cols()) +
                         " columns, model expects " + std::to_string(model.input_dim()));
  }
  const std::size_t n_steps = std::min(steps.value_or(model.t_ada()), model.t_ada());
  Matrix fans = initial_fans(model.f0, x, model.grid);
  for (std::size_t t = 0; t < n_steps; ++t) {
    fans = apply_step(model.weak_learners[t], x, fans, model.grid, model.step_config.boundary_B);
  }
  check_monotone(fans, "predict_quantiles");
  return fans;
}

void save_model(const EmqModel& model, const std::filesystem::path& path) {
  nlohmann::json header;
  std::vector<double> payload;
  header["type"] = kEmqMagic;
  header["variant"] = to_string(model.variant);
  header["grid"] = model.grid.levels();
  header["step_config"] = {{"boundary_B", model.step_config.boundary_B},
                           {"weak_hidden_sizes", model.step_config.weak_hidden_sizes}};
  header["adaptive_config"] = {{"t_max", model.adaptive_config.t_max},
                               {"t1", model.adaptive_config.t1},
                               {"t2", model.adaptive_config.t2}};
  header["norm_stats"] = io::to_json(model.norm_stats);
  header["ece_trace"] = model.ece_trace;
  header["stop_step"] = model.stop_step;
  header["stopped_early"] = model.stopped_early;
  header["t_ada"] = model.t_ada();
  header["metadata"] = model.metadata;
  nlohmann::json nets = nlohmann::json::array();
  nets.push_back(io::write_mlp(model.f0, payload));
  for (const auto& learner : model.weak_learners) nets.push_back(io::write_mlp(learner, payload));
  header["networks"] = nets;
  io::write_container(path, kEmqMagic, header, payload);
}

EmqModel load_model(const std::filesystem::path& path) {
  const io::Container c = io::read_container(path, kEmqMagic);
  try {
    const auto& h = c.header;
    EmqModel model;
    model.variant = variant_from_string(h.at("variant").get<std::string>());
    model.grid = QuantileGrid(h.at("grid").get<std::vector<double>>());
    model.step_config.boundary_B = h.at("step_config").at("boundary_B").get<double>();
    model.step_config.weak_hidden_sizes =
        h.at("step_config").at("weak_hidden_sizes").get<std::vector<std::size_t>>();
    model.adaptive_config.t_max = h.at("adaptive_config").at("t_max").get<std::size_t>();
    model.adaptive_config.t1 = h.at("adaptive_config").at("t1").get<std::size_t>();
    model.adaptive_config.t2 = h.at("adaptive_config").at("t2").get<std::size_t>();
    model.norm_stats = io::norm_stats_from_json(h.at("norm_stats"));
    model.ece_trace = h.at("ece_trace").get<std::vector<double>>();
    model.stop_step = h.at("stop_step").get<std::size_t>();
    model.stopped_early = h.at("stopped_early").get<bool>();
    model.metadata = h.at("metadata").get<std::map<std::string, std::string>>();
    const auto& nets = h.at("networks");
    if (!nets.is_array() || nets.empty()) throw FormatError("model container: no networks");
    std::size_t offset = 0;
    model.f0 = io::read_mlp(nets[0], c.payload, offset);
    for (std::size_t i = 1; i < nets.size(); ++i) {
      model.weak_learners.push_back(io::read_mlp(nets[i], c.payload, offset));
    }
    if (offset != c.payload.size()) throw FormatError("model container: trailing parameter data");
    if (model.t_ada() != h.at("t_ada").get<std::size_t>()) {
      throw FormatError("model container: weak learner count does not match t_ada");
    }
    if (model.f0.output_dim() != 2) throw FormatError("model container: bad initial network");
    for (const auto& learner : model.weak_learners) {
      if (learner.output_dim() != kCoeffCount || learner.input_dim() != model.f0.input_dim()) {
        throw FormatError("model container: bad weak learner shape");
      }
    }
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model container: bad header: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("model container: ") + e.what());
  }
}

}  // namespace emq
