#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "emq/app.hpp"
#include "emq/error.hpp"

namespace {

namespace fs = std::filesystem;
using emq::app::RunConfig;

// Flag values that override the config file when given.
struct Overrides {
  std::string config_path;
  std::optional<std::string> data;
  std::optional<std::string> label;
  bool no_header = false;
  std::optional<std::string> grid;
  std::optional<double> test_fraction;
  std::optional<std::size_t> batch_size;
  std::optional<double> learning_rate;
  std::optional<std::size_t> max_epochs;
  std::optional<std::size_t> patience;
  std::optional<double> val_fraction;
  std::optional<double> boundary;
  std::optional<std::size_t> t_max;
  std::optional<std::size_t> t1;
  std::optional<std::size_t> t2;
  bool sort_baseline = false;
  std::optional<std::string> out;

  void attach(CLI::App* cmd) {
    cmd->add_option("-c,--config", config_path, "JSON run configuration")->check(CLI::ExistingFile);
    cmd->add_option("--data", data, "CSV path or synthetic:<kind>:n=<rows>:seed=<seed>");
    cmd->add_option("--label", label, "label column name or zero-based index (CSV)");
    cmd->add_flag("--no-header", no_header, "CSV has no header row");
    cmd->add_option("--grid", grid, "percent99, uniform(K) or a comma-separated level list");
    cmd->add_option("--test-fraction", test_fraction);
    cmd->add_option("--batch-size", batch_size);
    cmd->add_option("--lr", learning_rate);
    cmd->add_option("--max-epochs", max_epochs);
    cmd->add_option("--patience", patience);
    cmd->add_option("--val-fraction", val_fraction);
    cmd->add_option("--boundary", boundary, "virtual support boundary B");
    cmd->add_option("--t-max", t_max);
    cmd->add_option("--t1", t1);
    cmd->add_option("--t2", t2);
    cmd->add_flag("--sort-baseline", sort_baseline, "sort baseline fans before scoring (ablation)");
    cmd->add_option("-o,--out", out, "output directory");
  }

  RunConfig build() const {
    RunConfig c = config_path.empty() ? RunConfig{} : emq::app::load_config(config_path);
    if (data) c.data.source = *data;
    if (label) c.data.label = *label;
    if (no_header) c.data.header = false;
    if (grid) c.grid = *grid;
    if (test_fraction) c.test_fraction = *test_fraction;
    if (batch_size) c.train.batch_size = *batch_size;
    if (learning_rate) c.train.learning_rate = *learning_rate;
    if (max_epochs) c.train.max_epochs = *max_epochs;
    if (patience) c.train.patience = *patience;
    if (val_fraction) c.train.val_fraction = *val_fraction;
    if (boundary) c.step.boundary_B = *boundary;
    if (t_max) c.adaptive.t_max = *t_max;
    if (t1) c.adaptive.t1 = *t1;
    if (t2) c.adaptive.t2 = *t2;
    if (sort_baseline) c.sort_baseline_quantiles = true;
    if (out) c.output_dir = *out;
    return c;
  }
};

emq::app::DataSpec data_spec(const std::string& source, const std::string& label, bool no_header) {
  emq::app::DataSpec spec;
  spec.source = source;
  spec.label = label;
  spec.header = !no_header;
  return spec;
}

void print_report(const emq::metrics::EvalReport& r) {
  std::printf("  EICE %.6f  EIS %.6f  TICE %.6f  ECE %.6f  (x100: %.3f %.3f %.3f)\n", r.eice, r.eis,
              r.tice, r.ece, r.eice * 100.0, r.eis * 100.0, r.tice * 100.0);
  if (r.crossing_rows > 0) std::printf("  crossing rows: %zu of %zu\n", r.crossing_rows, r.rows);
}

int run(int argc, char** argv) {
  CLI::App app{"Ensemble multi-quantile regression"};
  app.require_subcommand(1);
  app.set_version_flag("--version", emq::app::kToolVersion);

  Overrides train_ovr;
  std::optional<std::string> train_variant;
  std::optional<std::uint64_t> train_seed;
  auto* train = app.add_subcommand("train", "train one model and report on its test rows");
  train_ovr.attach(train);
  train->add_option("--variant", train_variant, "emq0, emq, emqw, vanilla-qr, qrw, interval-score");
  train->add_option("--seed", train_seed, "split and initialization seed");

  Overrides bench_ovr;
  std::vector<std::string> bench_variants;
  std::vector<std::uint64_t> bench_seeds;
  std::size_t jobs = 1;
  auto* bench = app.add_subcommand("benchmark", "train and evaluate every (variant, seed) cell");
  bench_ovr.attach(bench);
  bench->add_option("--variants", bench_variants)->delimiter(',');
  bench->add_option("--seeds", bench_seeds)->delimiter(',');
  bench->add_option("-j,--jobs", jobs, "cells trained in parallel")->check(CLI::PositiveNumber);

  emq::app::EvaluateOptions eval_opts;
  std::string eval_model, eval_data, eval_label;
  std::optional<std::string> eval_manifest, eval_out;
  bool eval_no_header = false;
  auto* evaluate = app.add_subcommand("evaluate", "score a saved model on a dataset");
  evaluate->add_option("-m,--model", eval_model)->required()->check(CLI::ExistingFile);
  evaluate->add_option("--data", eval_data)->required();
  evaluate->add_option("--label", eval_label);
  evaluate->add_flag("--no-header", eval_no_header);
  evaluate->add_option("--manifest", eval_manifest);
  evaluate->add_option("--rows", eval_opts.rows, "test, val, train or all")
      ->check(CLI::IsMember({"test", "val", "train", "all"}));
  evaluate->add_flag("--allow-train-eval", eval_opts.allow_train_eval);
  evaluate->add_option("-o,--out", eval_out);

  std::string dens_model, dens_data, dens_label, dens_out = "density.csv";
  std::vector<std::size_t> dens_rows;
  bool dens_no_header = false;
  auto* density = app.add_subcommand("density", "implied densities of selected rows");
  density->add_option("-m,--model", dens_model)->required()->check(CLI::ExistingFile);
  density->add_option("--data", dens_data)->required();
  density->add_option("--label", dens_label);
  density->add_flag("--no-header", dens_no_header);
  density->add_option("--rows", dens_rows, "row indices")->required()->delimiter(',');
  density->add_option("-o,--out", dens_out);

  std::string w_grid = "percent99";
  bool w_verify = false;
  std::size_t w_draws = 10'000'000;
  std::uint64_t w_seed = 0;
  std::optional<std::string> w_out;
  auto* weights = app.add_subcommand("weights", "tail weights of the weighted loss");
  weights->add_option("--grid", w_grid);
  weights->add_flag("--verify", w_verify, "add a Monte-Carlo column");
  weights->add_option("--draws", w_draws);
  weights->add_option("--seed", w_seed);
  weights->add_option("-o,--out", w_out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  if (train->parsed()) {
    RunConfig cfg = train_ovr.build();
    if (train_variant) cfg.variants = {*train_variant};
    if (train_seed) cfg.seeds = {*train_seed};
    if (cfg.variants.size() != 1 || cfg.seeds.size() != 1) {
      throw emq::ConfigError("train takes exactly one variant and one seed; use benchmark for more");
    }
    const std::string variant = cfg.variants.front();
    const std::uint64_t seed = cfg.seeds.front();
    const fs::path dir = cfg.output_dir.empty()
                             ? emq::app::default_output_root() /
                                   (variant + "-seed" + std::to_string(seed) + "-" +
                                    emq::app::cell_config_hash(cfg, variant, seed).substr(0, 12))
                             : fs::path(cfg.output_dir);
    const auto outcome = emq::app::cmd_train(cfg, variant, seed, dir);
    std::printf("trained %s (seed %llu) -> %s\n", variant.c_str(),
                static_cast<unsigned long long>(seed), dir.string().c_str());
    if (emq::app::is_emq_variant(variant)) {
      std::printf("  T_ada %zu, exploration stopped at t'=%zu\n", outcome.t_ada, outcome.stop_step);
    }
    print_report(outcome.report);
    std::printf("  manifest sha256 %s\n", outcome.manifest_hash.c_str());
  } else if (bench->parsed()) {
    RunConfig cfg = bench_ovr.build();
    if (!bench_variants.empty()) cfg.variants = bench_variants;
    if (!bench_seeds.empty()) cfg.seeds = bench_seeds;
    const fs::path dir = cfg.output_dir.empty()
                             ? emq::app::default_output_root() / "benchmark"
                             : fs::path(cfg.output_dir);
    const auto outcome = emq::app::cmd_benchmark(cfg, dir, jobs);
    std::printf("%zu cells, %zu failed -> %s\n", outcome.cells.size(), outcome.failures,
                outcome.aggregate_path.string().c_str());
    std::ifstream agg(outcome.aggregate_path);
    std::cout << agg.rdbuf();
    if (outcome.failures > 0) return 2;
  } else if (evaluate->parsed()) {
    eval_opts.model_path = eval_model;
    eval_opts.data = data_spec(eval_data, eval_label, eval_no_header);
    if (eval_manifest) eval_opts.manifest_path = fs::path(*eval_manifest);
    if (eval_out) eval_opts.output_dir = fs::path(*eval_out);
    const auto outcome = emq::app::cmd_evaluate(eval_opts);
    std::printf("evaluated %zu rows -> %s\n", outcome.report.rows, outcome.json_path.string().c_str());
    print_report(outcome.report);
  } else if (density->parsed()) {
    emq::app::DensityOptions opts;
    opts.model_path = dens_model;
    opts.data = data_spec(dens_data, dens_label, dens_no_header);
    opts.rows = dens_rows;
    opts.output_path = dens_out;
    emq::app::cmd_density(opts);
    std::printf("wrote %s\n", dens_out.c_str());
  } else if (weights->parsed()) {
    const auto grid = emq::QuantileGrid::parse(w_grid);
    const std::string csv = emq::app::weights_to_csv(emq::app::cmd_weights(grid, w_verify, w_draws, w_seed));
    if (w_out) {
      std::ofstream(*w_out, std::ios::binary) << csv;
    } else {
      std::cout << csv;
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const emq::NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return 2;
  } catch (const emq::StateError& e) {
    std::fprintf(stderr, "internal error: %s\n", e.what());
    return 2;
  } catch (const emq::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "runtime error: %s\n", e.what());
    return 2;
  }
}
