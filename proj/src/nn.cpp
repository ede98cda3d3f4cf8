#include "emq/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "emq/error.hpp"

namespace emq::nn {
namespace {

double activate(Activation a, double x) {
  switch (a) {
    case Activation::kTanh:
      return std::tanh(x);
    case Activation::kRelu:
      return x > 0.0 ? x : 0.0;
    case Activation::kLinear:
      break;
  }
  return x;
}

// Derivative expressed through the pre-activation and the activation value.
double activate_grad(Activation a, double pre, double post) {
  switch (a) {
    case Activation::kTanh:
      return 1.0 - post * post;
    case Activation::kRelu:
      return pre > 0.0 ? 1.0 : 0.0;
    case Activation::kLinear:
      break;
  }
  return 1.0;
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// out = in * w + b, accumulated in a fixed order so each row's result does not
// depend on the other rows of the batch.
void affine(const Matrix& in, const Dense& layer, Matrix& out) {
  const std::size_t n = in.rows();
  const std::size_t fan_in = layer.weight.rows();
  const std::size_t fan_out = layer.weight.cols();
  out = Matrix(n, fan_out);
  for (std::size_t i = 0; i < n; ++i) {
    auto dst = out.row(i);
    std::copy(layer.bias.begin(), layer.bias.end(), dst.begin());
    auto src = in.row(i);
    for (std::size_t k = 0; k < fan_in; ++k) {
      const double x = src[k];
      auto w = layer.weight.row(k);
      for (std::size_t j = 0; j < fan_out; ++j) dst[j] += x * w[j];
    }
  }
}

void check_shape(const MlpShape& shape) {
  if (shape.layer_sizes.size() < 2) {
    throw ConfigError("Mlp: need at least an input and an output layer");
  }
  for (std::size_t s : shape.layer_sizes) {
    if (s == 0) throw ConfigError("Mlp: layer sizes must be positive");
  }
  if (shape.hidden.size() != shape.layer_sizes.size() - 2) {
    throw ConfigError("Mlp: expected one activation per hidden layer");
  }
  if (!shape.softplus_outputs.empty() && shape.softplus_outputs.size() != shape.layer_sizes.back()) {
    throw ConfigError("Mlp: softplus mask must cover every output");
  }
}

bool all_finite(const ParamSet& params) {
  for (const auto& layer : params) {
    for (double w : layer.weight.values()) {
      if (!std::isfinite(w)) return false;
    }
    for (double b : layer.bias) {
      if (!std::isfinite(b)) return false;
    }
  }
  return true;
}

}  // namespace

const char* to_string(Activation activation) {
  switch (activation) {
    case Activation::kTanh:
      return "tanh";
    case Activation::kRelu:
      return "relu";
    case Activation::kLinear:
      break;
  }
  return "linear";
}

Activation activation_from_string(const std::string& name) {
  if (name == "tanh") return Activation::kTanh;
  if (name == "relu") return Activation::kRelu;
  if (name == "linear") return Activation::kLinear;
  throw ConfigError("unknown activation '" + name + "'");
}

ParamSet zeros_like(const ParamSet& params) {
  ParamSet out;
  out.reserve(params.size());
  for (const auto& layer : params) {
    out.push_back({Matrix(layer.weight.rows(), layer.weight.cols()),
                   std::vector<double>(layer.bias.size(), 0.0)});
  }
  return out;
}

MlpShape make_shape(std::vector<std::size_t> layer_sizes, Activation hidden,
                    std::vector<bool> softplus_outputs) {
  MlpShape shape;
  const std::size_t hidden_count = layer_sizes.size() >= 2 ? layer_sizes.size() - 2 : 0;
  shape.layer_sizes = std::move(layer_sizes);
  shape.hidden.assign(hidden_count, hidden);
  shape.softplus_outputs = std::move(softplus_outputs);
  return shape;
}

double softplus(double x) {
  // log(1 + e^x) without overflow.
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double xavier_std(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
}

Mlp::Mlp(MlpShape shape, ParamSet params, std::uint64_t seed)
    : shape_(std::move(shape)), params_(std::move(params)), seed_(seed) {
  check_shape(shape_);
  if (params_.size() != shape_.layer_sizes.size() - 1) {
    throw DimensionError("Mlp: parameter count does not match layer count");
  }
  for (std::size_t l = 0; l < params_.size(); ++l) {
    const auto& layer = params_[l];
    if (layer.weight.rows() != shape_.layer_sizes[l] ||
        layer.weight.cols() != shape_.layer_sizes[l + 1] ||
        layer.bias.size() != shape_.layer_sizes[l + 1]) {
      throw DimensionError("Mlp: layer " + std::to_string(l) + " has inconsistent shape");
    }
  }
}

std::size_t Mlp::parameter_count() const {
  std::size_t count = 0;
  for (const auto& layer : params_) count += layer.weight.size() + layer.bias.size();
  return count;
}

Mlp mlp_init(const MlpShape& shape, std::uint64_t seed) {
  check_shape(shape);
  std::mt19937_64 rng(seed);
  ParamSet params;
  for (std::size_t l = 0; l + 1 < shape.layer_sizes.size(); ++l) {
    const std::size_t fan_in = shape.layer_sizes[l];
    const std::size_t fan_out = shape.layer_sizes[l + 1];
    std::normal_distribution<double> dist(0.0, xavier_std(fan_in, fan_out));
    Dense layer{Matrix(fan_in, fan_out), std::vector<double>(fan_out, 0.0)};
    for (double& w : layer.weight.values()) w = dist(rng);
    params.push_back(std::move(layer));
  }
  return Mlp(shape, std::move(params), seed);
}

Matrix Mlp::forward(const Matrix& batch) const {
  ForwardCache scratch;
  return forward(batch, scratch);
}

Matrix Mlp::forward(const Matrix& batch, ForwardCache& cache) const {
  if (batch.cols() != input_dim()) {
    std::ostringstream msg;
    msg << "Mlp::forward: batch has " << batch.cols() << " columns, network expects "
        << input_dim();
    throw DimensionError(msg.str());
  }
  const std::size_t layers = params_.size();
  cache.inputs.resize(layers);
  cache.pre.resize(layers);
  cache.inputs[0] = batch;
  for (std::size_t l = 0; l < layers; ++l) {
    affine(cache.inputs[l], params_[l], cache.pre[l]);
    Matrix post = cache.pre[l];
    if (l + 1 < layers) {
      const Activation a = shape_.hidden[l];
      for (double& v : post.values()) v = activate(a, v);
      cache.inputs[l + 1] = std::move(post);
    } else {
      if (!shape_.softplus_outputs.empty()) {
        for (std::size_t i = 0; i < post.rows(); ++i) {
          auto row = post.row(i);
          for (std::size_t j = 0; j < row.size(); ++j) {
            if (shape_.softplus_outputs[j]) row[j] = softplus(row[j]);
          }
        }
      }
      cache.output = std::move(post);
    }
  }
  return cache.output;
}

ParamSet Mlp::backward(const ForwardCache& cache, const Matrix& upstream) const {
  const std::size_t layers = params_.size();
  if (cache.inputs.size() != layers || cache.pre.size() != layers ||
      cache.output.rows() != upstream.rows() || cache.output.cols() != upstream.cols() ||
      cache.inputs[0].cols() != input_dim()) {
    throw StateError("Mlp::backward: no matching forward pass cached for this gradient");
  }
  const std::size_t n = upstream.rows();

  // delta = dL/d(pre-activation) of the current layer.
  Matrix delta = upstream;
  if (!shape_.softplus_outputs.empty()) {
    const Matrix& pre = cache.pre.back();
    for (std::size_t i = 0; i < n; ++i) {
      auto d = delta.row(i);
      auto p = pre.row(i);
      for (std::size_t j = 0; j < d.size(); ++j) {
        if (shape_.softplus_outputs[j]) d[j] *= sigmoid(p[j]);
      }
    }
  }

  ParamSet grads = zeros_like(params_);
  for (std::size_t l = layers; l-- > 0;) {
    const Matrix& in = cache.inputs[l];
    Dense& g = grads[l];
    const std::size_t fan_in = g.weight.rows();
    const std::size_t fan_out = g.weight.cols();
    for (std::size_t i = 0; i < n; ++i) {
      auto d = delta.row(i);
      auto x = in.row(i);
      for (std::size_t k = 0; k < fan_in; ++k) {
        const double xk = x[k];
        auto gw = g.weight.row(k);
        for (std::size_t j = 0; j < fan_out; ++j) gw[j] += xk * d[j];
      }
      for (std::size_t j = 0; j < fan_out; ++j) g.bias[j] += d[j];
    }
    if (l == 0) break;

    const Dense& layer = params_[l];
    const Activation a = shape_.hidden[l - 1];
    const Matrix& pre = cache.pre[l - 1];
    Matrix next(n, fan_in);
    for (std::size_t i = 0; i < n; ++i) {
      auto d = delta.row(i);
      auto out = next.row(i);
      for (std::size_t k = 0; k < fan_in; ++k) {
        auto w = layer.weight.row(k);
        double s = 0.0;
        for (std::size_t j = 0; j < fan_out; ++j) s += w[j] * d[j];
        out[k] = s * activate_grad(a, pre(i, k), in(i, k));
      }
    }
    delta = std::move(next);
  }
  return grads;
}

AdamState AdamState::for_params(const ParamSet& params) {
  AdamState state;
  state.m = zeros_like(params);
  state.v = zeros_like(params);
  return state;
}

void adam_step(AdamState& state, ParamSet& params, const ParamSet& grads, double learning_rate) {
  if (grads.size() != params.size() || state.m.size() != params.size() ||
      state.v.size() != params.size()) {
    throw DimensionError("adam_step: gradient/state layout does not match parameters");
  }
  for (std::size_t l = 0; l < params.size(); ++l) {
    if (grads[l].weight.rows() != params[l].weight.rows() ||
        grads[l].weight.cols() != params[l].weight.cols() ||
        grads[l].bias.size() != params[l].bias.size()) {
      throw DimensionError("adam_step: gradient shape mismatch at layer " + std::to_string(l));
    }
  }
  if (!all_finite(grads)) throw NumericError("adam_step: non-finite gradient");

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  auto update = [&](std::span<double> p, std::span<const double> g, std::span<double> m,
                    std::span<double> v) {
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      p[i] -= learning_rate * m_hat / (std::sqrt(v_hat) + state.epsilon);
    }
  };
  for (std::size_t l = 0; l < params.size(); ++l) {
    update(params[l].weight.values(), grads[l].weight.values(), state.m[l].weight.values(),
           state.v[l].weight.values());
    update(params[l].bias, grads[l].bias, state.m[l].bias, state.v[l].bias);
  }
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("train: learning_rate must be > 0");
  }
  if (max_epochs < 1) throw ConfigError("train: max_epochs must be >= 1");
  if (patience < 1) throw ConfigError("train: patience must be >= 1");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
    throw ConfigError("train: val_fraction must lie in (0, 1)");
  }
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  auto splitmix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return splitmix(seed ^ splitmix(stream + 0x632be59bd9b4e019ULL));
}

double evaluate_loss(const Mlp& mlp, const Matrix& x, const BatchLoss& loss) {
  const Matrix out = mlp.forward(x);
  std::vector<std::size_t> rows(x.rows());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  return loss(out, rows, nullptr);
}

TrainRecord train_with_early_stopping(Mlp& mlp, const Matrix& x_train, const BatchLoss& train_loss,
                                      const Matrix& x_val, const BatchLoss& val_loss,
                                      const TrainConfig& cfg) {
  cfg.validate();
  if (x_train.rows() == 0 || x_val.rows() == 0) {
    throw DataError("train: training and validation sets must be non-empty");
  }
  if (x_train.cols() != mlp.input_dim() || x_val.cols() != mlp.input_dim()) {
    throw DimensionError("train: feature dimension does not match network input");
  }

  TrainRecord record;
  record.best_val_loss = evaluate_loss(mlp, x_val, val_loss);
  if (!std::isfinite(record.best_val_loss)) {
    throw NumericError("train: non-finite validation loss at initialization");
  }
  record.val_history.push_back(record.best_val_loss);
  ParamSet best = mlp.params();

  AdamState adam = AdamState::for_params(mlp.params());
  const std::size_t n = x_train.rows();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  ForwardCache cache;
  Matrix grad;
  std::size_t stale = 0;

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::mt19937_64 rng(derive_seed(cfg.seed, epoch));
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t stop = std::min(n, start + cfg.batch_size);
      std::span<const std::size_t> rows(order.data() + start, stop - start);
      const Matrix batch = x_train.gather_rows(rows);
      const Matrix out = mlp.forward(batch, cache);
      grad = Matrix(out.rows(), out.cols());
      const double loss = train_loss(out, rows, &grad);
      if (!std::isfinite(loss)) {
        std::ostringstream msg;
        msg << "train: non-finite training loss at epoch " << epoch << ", batch starting at "
            << start;
        throw NumericError(msg.str());
      }
      adam_step(adam, mlp.params(), mlp.backward(cache, grad), cfg.learning_rate);
    }

    const double val = evaluate_loss(mlp, x_val, val_loss);
    if (!std::isfinite(val)) {
      throw NumericError("train: non-finite validation loss at epoch " + std::to_string(epoch));
    }
    record.val_history.push_back(val);
    record.epochs_run = epoch;
    if (val < record.best_val_loss) {
      record.best_val_loss = val;
      record.best_epoch = epoch;
      best = mlp.params();
      stale = 0;
    } else if (++stale >= cfg.patience) {
      break;
    }
  }
  mlp.params() = std::move(best);
  return record;
}

}  // namespace emq::nn
