#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "emq/matrix.hpp"

namespace emq::nn {

enum class Activation { kLinear, kTanh, kRelu };

const char* to_string(Activation activation);
Activation activation_from_string(const std::string& name);

// One affine layer: out = in * weight + bias, weight is fan_in x fan_out.
struct Dense {
  Matrix weight;
  std::vector<double> bias;

  bool operator==(const Dense&) const = default;
};

// Parameters (or gradients, or optimizer moments) for every layer.
using ParamSet = std::vector<Dense>;

ParamSet zeros_like(const ParamSet& params);

struct MlpShape {
  // Input dimension first, output dimension last.
  std::vector<std::size_t> layer_sizes;
  // One tag per hidden layer.
  std::vector<Activation> hidden;
  // Outputs flagged true pass through softplus; empty means all linear.
  std::vector<bool> softplus_outputs;

  bool operator==(const MlpShape&) const = default;
};

// Convenience: same activation on every hidden layer.
MlpShape make_shape(std::vector<std::size_t> layer_sizes, Activation hidden,
                    std::vector<bool> softplus_outputs = {});

// Intermediate activations of one forward pass, consumed by Mlp::backward.
struct ForwardCache {
  // inputs[l] is the input to layer l; pre[l] its pre-activation.
  std::vector<Matrix> inputs;
  std::vector<Matrix> pre;
  Matrix output;
};

class Mlp {
 public:
  Mlp() = default;
  Mlp(MlpShape shape, ParamSet params, std::uint64_t seed);

  const MlpShape& shape() const { return shape_; }
  std::size_t input_dim() const { return shape_.layer_sizes.front(); }
  std::size_t output_dim() const { return shape_.layer_sizes.back(); }
  std::size_t num_layers() const { return params_.size(); }
  std::uint64_t seed() const { return seed_; }

  const ParamSet& params() const { return params_; }
  ParamSet& params() { return params_; }

  std::size_t parameter_count() const;

  Matrix forward(const Matrix& batch) const;
  Matrix forward(const Matrix& batch, ForwardCache& cache) const;

  // Gradients of a scalar loss with respect to every parameter, given the
  // gradient of that loss with respect to the outputs of the cached pass.
  ParamSet backward(const ForwardCache& cache, const Matrix& upstream) const;

  bool operator==(const Mlp&) const = default;

 private:
  MlpShape shape_;
  ParamSet params_;
  std::uint64_t seed_ = 0;
};

// Xavier-normal weights (std = sqrt(2 / (fan_in + fan_out))), zero biases.
Mlp mlp_init(const MlpShape& shape, std::uint64_t seed);

double xavier_std(std::size_t fan_in, std::size_t fan_out);

double softplus(double x);

struct AdamState {
  ParamSet m;
  ParamSet v;
  std::uint64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  static AdamState for_params(const ParamSet& params);
};

// Bias-corrected Adam update. Throws NumericError on a non-finite gradient,
// leaving both the parameters and the state untouched.
void adam_step(AdamState& state, ParamSet& params, const ParamSet& grads, double learning_rate);

struct TrainConfig {
  std::size_t batch_size = 128;
  double learning_rate = 0.01;
  std::size_t max_epochs = 1000;
  std::size_t patience = 20;
  double val_fraction = 0.2;
  std::uint64_t seed = 0;

  void validate() const;
};

// Mean loss over the rows of a batch. `rows` are indices into the data set the
// loss was built for, aligned with the rows of `outputs`. When `grad` is non-null
// it receives d(mean loss)/d(outputs), shaped like `outputs`.
using BatchLoss =
    std::function<double(const Matrix& outputs, std::span<const std::size_t> rows, Matrix* grad)>;

struct TrainRecord {
  // 0 means the initial parameters were never beaten.
  std::size_t best_epoch = 0;
  double best_val_loss = 0.0;
  std::size_t epochs_run = 0;
  // val_history[e] is the validation loss after epoch e (index 0: before training).
  std::vector<double> val_history;
};

// Mini-batch Adam with per-epoch seeded shuffling. Keeps the parameters of the
// epoch with the lowest validation loss and stops after `patience` epochs
// without strict improvement.
TrainRecord train_with_early_stopping(Mlp& mlp, const Matrix& x_train, const BatchLoss& train_loss,
                                      const Matrix& x_val, const BatchLoss& val_loss,
                                      const TrainConfig& cfg);

// Whole-set loss (no gradient) of `mlp` under `loss`.
double evaluate_loss(const Mlp& mlp, const Matrix& x, const BatchLoss& loss);

// Deterministic 64-bit mixing of a seed with a stream index.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace emq::nn
