#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "emq/error.hpp"
#include "emq/nn.hpp"
#include "oracles.hpp"

using namespace emq;
using namespace emq::nn;

namespace {

Matrix random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Matrix m(rows, cols);
  for (double& v : m.values()) v = normal(rng);
  return m;
}

// Loss = sum of outputs weighted by a fixed random matrix; smooth in every
// parameter.
double weighted_sum(const Matrix& out, const Matrix& weights) {
  double total = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) total += out.values()[i] * weights.values()[i];
  return total;
}

}  // namespace

TEST_CASE("mlp_init chains layer shapes") {
  const Mlp net = mlp_init(make_shape({3, 5, 4, 2}, Activation::kTanh), 1);
  REQUIRE(net.num_layers() == 3);
  CHECK(net.params()[0].weight.rows() == 3);
  CHECK(net.params()[0].weight.cols() == 5);
  CHECK(net.params()[1].weight.rows() == 5);
  CHECK(net.params()[2].weight.cols() == 2);
  CHECK(net.params()[2].bias.size() == 2);
  CHECK(net.parameter_count() == 3 * 5 + 5 + 5 * 4 + 4 + 4 * 2 + 2);
  for (const auto& layer : net.params()) {
    for (double b : layer.bias) CHECK(b == 0.0);
  }
}

TEST_CASE("mlp_init is a function of the seed") {
  const auto shape = make_shape({4, 6, 1}, Activation::kRelu);
  CHECK(mlp_init(shape, 7) == mlp_init(shape, 7));
  CHECK_FALSE(mlp_init(shape, 7).params() == mlp_init(shape, 8).params());
}

TEST_CASE("Xavier-normal scale") {
  CHECK(xavier_std(3, 1) == doctest::Approx(std::sqrt(0.5)).epsilon(1e-15));
  CHECK(xavier_std(3, 1) == doctest::Approx(0.7071).epsilon(1e-4));

  // 300 x 400 = 1.2e5 draws.
  const Mlp net = mlp_init(make_shape({300, 400}, Activation::kLinear), 11);
  const auto w = net.params()[0].weight.values();
  const double mean = std::accumulate(w.begin(), w.end(), 0.0) / static_cast<double>(w.size());
  double ss = 0.0;
  for (double v : w) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / static_cast<double>(w.size() - 1));
  CHECK(std::abs(sd / xavier_std(300, 400) - 1.0) < 0.02);
}

TEST_CASE("shape validation") {
  CHECK_THROWS_AS(mlp_init(make_shape({3}, Activation::kTanh), 0), ConfigError);
  CHECK_THROWS_AS(mlp_init(make_shape({3, 0, 1}, Activation::kTanh), 0), ConfigError);
  CHECK_THROWS_AS(mlp_init(make_shape({3, 2}, Activation::kTanh, {true}), 0), ConfigError);
  const Mlp net = mlp_init(make_shape({2, 3}, Activation::kTanh), 0);
  ParamSet wrong = net.params();
  wrong[0].bias.push_back(0.0);
  CHECK_THROWS_AS(Mlp(net.shape(), wrong, 0), DimensionError);
}

TEST_CASE("forward: identity layer, tanh at zero, softplus at zero") {
  Mlp identity = mlp_init(make_shape({2, 2}, Activation::kLinear), 0);
  identity.params()[0].weight = Matrix::from_rows({{1, 0}, {0, 1}});
  const Matrix out = identity.forward(Matrix::from_rows({{1, 2}}));
  CHECK(out(0, 0) == 1.0);
  CHECK(out(0, 1) == 2.0);

  Mlp hidden = mlp_init(make_shape({1, 1, 1}, Activation::kTanh), 0);
  hidden.params()[0].weight(0, 0) = 0.0;
  ForwardCache cache;
  hidden.forward(Matrix::from_rows({{3.0}}), cache);
  CHECK(cache.pre[0](0, 0) == 0.0);
  CHECK(cache.inputs[1](0, 0) == 0.0);

  Mlp soft = mlp_init(make_shape({1, 1}, Activation::kLinear, {true}), 0);
  soft.params()[0].weight(0, 0) = 0.0;
  CHECK(soft.forward(Matrix::from_rows({{5.0}}))(0, 0) == doctest::Approx(0.693147).epsilon(1e-6));
  CHECK(softplus(0.0) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(softplus(800.0) == 800.0);
  CHECK(softplus(-800.0) >= 0.0);
}

TEST_CASE("forward rejects a wrong input width") {
  const Mlp net = mlp_init(make_shape({3, 2}, Activation::kTanh), 0);
  CHECK_THROWS_AS(net.forward(Matrix(4, 2)), DimensionError);
}

TEST_CASE("backward: zero upstream, affine chain rule, mismatched cache") {
  std::mt19937_64 rng(3);
  const Mlp net = mlp_init(make_shape({3, 4, 2}, Activation::kTanh), 5);
  ForwardCache cache;
  const Matrix out = net.forward(random_matrix(6, 3, rng), cache);
  const ParamSet zero = net.backward(cache, Matrix(out.rows(), out.cols()));
  for (const auto& layer : zero) {
    for (double v : layer.weight.values()) CHECK(v == 0.0);
    for (double v : layer.bias) CHECK(v == 0.0);
  }
  CHECK_THROWS_AS(net.backward(cache, Matrix(out.rows() + 1, out.cols())), StateError);
  CHECK_THROWS_AS(net.backward(ForwardCache{}, Matrix(1, 2)), StateError);

  const Mlp linear = mlp_init(make_shape({1, 1}, Activation::kLinear), 0);
  ForwardCache c1;
  linear.forward(Matrix::from_rows({{2.5}}), c1);
  const ParamSet g = linear.backward(c1, Matrix::from_rows({{1.0}}));
  CHECK(g[0].weight(0, 0) == 2.5);
  CHECK(g[0].bias[0] == 1.0);
}

TEST_CASE("backward matches central finite differences") {
  std::mt19937_64 rng(2024);
  const Activation acts[] = {Activation::kTanh, Activation::kLinear, Activation::kTanh};
  for (int instance = 0; instance < 20; ++instance) {
    std::uniform_int_distribution<std::size_t> size(1, 5);
    const std::size_t d = size(rng);
    const std::size_t h = size(rng);
    const std::size_t o = size(rng);
    const std::vector<bool> mask(o, instance % 2 == 1);
    const Mlp net = mlp_init(make_shape({d, h, o}, acts[instance % 3], mask),
                             static_cast<std::uint64_t>(instance));
    const Matrix x = random_matrix(4, d, rng);
    const Matrix w = random_matrix(4, o, rng);
    ForwardCache cache;
    net.forward(x, cache);
    const ParamSet analytic = net.backward(cache, w);
    const ParamSet numeric =
        oracle::fd_gradient(net, [&](const Mlp& m) { return weighted_sum(m.forward(x), w); });
    CHECK(oracle::max_relative_error(analytic, numeric) < 1e-4);
  }
}

TEST_CASE("adam_step") {
  const Mlp net = mlp_init(make_shape({2, 3, 1}, Activation::kTanh), 9);

  SUBCASE("zero gradients leave parameters unchanged") {
    ParamSet params = net.params();
    AdamState state = AdamState::for_params(params);
    const ParamSet zero = zeros_like(params);
    for (int i = 0; i < 5; ++i) adam_step(state, params, zero, 0.01);
    CHECK(params == net.params());
    CHECK(state.step == 5);
  }

  SUBCASE("first step moves every parameter by about lr against the gradient") {
    ParamSet params = net.params();
    AdamState state = AdamState::for_params(params);
    ParamSet grads = zeros_like(params);
    for (auto& layer : grads) {
      for (double& v : layer.weight.values()) v = 0.3;
      for (double& v : layer.bias) v = -2.0;
    }
    adam_step(state, params, grads, 0.01);
    // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
    for (std::size_t l = 0; l < params.size(); ++l) {
      for (std::size_t i = 0; i < params[l].weight.size(); ++i) {
        const double delta = params[l].weight.values()[i] - net.params()[l].weight.values()[i];
        CHECK(delta == doctest::Approx(-0.01 * 0.3 / (0.3 + 1e-8)).epsilon(1e-9));
      }
      for (std::size_t i = 0; i < params[l].bias.size(); ++i) {
        CHECK(params[l].bias[i] - net.params()[l].bias[i] ==
              doctest::Approx(0.01 * 2.0 / (2.0 + 1e-8)).epsilon(1e-9));
      }
    }
  }

  SUBCASE("non-finite gradient aborts without side effects") {
    ParamSet params = net.params();
    AdamState state = AdamState::for_params(params);
    ParamSet grads = zeros_like(params);
    grads.back().bias[0] = std::nan("");
    CHECK_THROWS_AS(adam_step(state, params, grads, 0.01), NumericError);
    CHECK(params == net.params());
    CHECK(state.step == 0);
  }
}

TEST_CASE("TrainConfig validation") {
  TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.patience = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.learning_rate = -1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.val_fraction = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

namespace {

struct LinearTarget {
  Matrix x_train, x_val;
  std::vector<double> y_train, y_val;
};

LinearTarget make_linear_target(std::size_t n) {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  LinearTarget t;
  const std::size_t n_val = n / 5;
  t.x_train = Matrix(n - n_val, 1);
  t.x_val = Matrix(n_val, 1);
  for (std::size_t i = 0; i < n - n_val; ++i) {
    t.x_train(i, 0) = u(rng);
    t.y_train.push_back(2.0 * t.x_train(i, 0));
  }
  for (std::size_t i = 0; i < n_val; ++i) {
    t.x_val(i, 0) = u(rng);
    t.y_val.push_back(2.0 * t.x_val(i, 0));
  }
  return t;
}

BatchLoss mse(const std::vector<double>& y) {
  return [&y](const Matrix& out, std::span<const std::size_t> rows, Matrix* grad) {
    double total = 0.0;
    const double inv_n = 1.0 / static_cast<double>(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const double r = out(i, 0) - y[rows[i]];
      total += r * r;
      if (grad) (*grad)(i, 0) = 2.0 * r * inv_n;
    }
    return total * inv_n;
  };
}

}  // namespace

TEST_CASE("early stopping converges on y = 2x and restores the best epoch") {
  const LinearTarget t = make_linear_target(1000);
  Mlp net = mlp_init(make_shape({1, 8, 1}, Activation::kTanh), 4);
  TrainConfig cfg;
  cfg.seed = 4;
  cfg.max_epochs = 400;
  const TrainRecord rec =
      train_with_early_stopping(net, t.x_train, mse(t.y_train), t.x_val, mse(t.y_val), cfg);
  CHECK(rec.best_val_loss < 1e-3);
  CHECK(evaluate_loss(net, t.x_val, mse(t.y_val)) == rec.best_val_loss);
  CHECK(rec.val_history.size() == rec.epochs_run + 1);
  CHECK(rec.best_val_loss == *std::min_element(rec.val_history.begin(), rec.val_history.end()));
  CHECK(rec.val_history[rec.best_epoch] == rec.best_val_loss);
}

TEST_CASE("training is deterministic for a fixed seed") {
  const LinearTarget t = make_linear_target(300);
  TrainConfig cfg;
  cfg.seed = 12;
  cfg.max_epochs = 15;
  cfg.batch_size = 32;
  Mlp a = mlp_init(make_shape({1, 4, 1}, Activation::kTanh), 1);
  Mlp b = a;
  const auto ra = train_with_early_stopping(a, t.x_train, mse(t.y_train), t.x_val, mse(t.y_val), cfg);
  const auto rb = train_with_early_stopping(b, t.x_train, mse(t.y_train), t.x_val, mse(t.y_val), cfg);
  CHECK(a == b);
  CHECK(ra.val_history == rb.val_history);
}

TEST_CASE("patience counts epochs without strict improvement") {
  const LinearTarget t = make_linear_target(200);
  TrainConfig cfg;
  cfg.patience = 3;
  cfg.max_epochs = 50;
  Mlp net = mlp_init(make_shape({1, 2, 1}, Activation::kTanh), 2);
  const Mlp initial = net;
  // A flat validation loss never improves, so the initial parameters win.
  const BatchLoss flat = [](const Matrix&, std::span<const std::size_t>, Matrix*) { return 1.0; };
  const auto rec = train_with_early_stopping(net, t.x_train, mse(t.y_train), t.x_val, flat, cfg);
  CHECK(rec.epochs_run == 3);
  CHECK(rec.best_epoch == 0);
  CHECK(net == initial);
}

TEST_CASE("non-finite loss aborts training") {
  const LinearTarget t = make_linear_target(100);
  Mlp net = mlp_init(make_shape({1, 2, 1}, Activation::kTanh), 2);
  const BatchLoss bad = [](const Matrix&, std::span<const std::size_t>, Matrix*) {
    return std::numeric_limits<double>::infinity();
  };
  CHECK_THROWS_AS(train_with_early_stopping(net, t.x_train, bad, t.x_val, bad, TrainConfig{}),
                  NumericError);
}

TEST_CASE("derive_seed separates streams") {
  CHECK(derive_seed(1, 0) != derive_seed(1, 1));
  CHECK(derive_seed(1, 5) != derive_seed(2, 5));
  CHECK(derive_seed(3, 9) == derive_seed(3, 9));
}
