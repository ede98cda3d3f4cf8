#include "emq/app.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <random>
#include <sstream>
#include <thread>
#include <variant>

#include "emq/baselines.hpp"
#include "emq/container.hpp"
#include "emq/error.hpp"
#include "emq/log.hpp"

namespace emq::app {
namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::string fmt17(double v) {
  std::ostringstream out;
  out << std::setprecision(17) << v;
  return out.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw DataError("failed writing '" + path.string() + "'");
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

bool all_digits(const std::string& s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); });
}

// ---- config parsing helpers ----------------------------------------------

void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError("config field '" + where + "': expected an object");
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      throw ConfigError("config: unknown field '" + (where.empty() ? key : where + "." + key) + "'");
    }
  }
}

template <typename T>
void read_field(const json& j, const char* key, const std::string& where, T& out) {
  if (!j.contains(key)) return;
  const std::string name = where.empty() ? key : where + "." + key;
  const json& v = j.at(key);
  if constexpr (std::is_same_v<T, bool>) {
    if (!v.is_boolean()) throw ConfigError("config field '" + name + "': expected a boolean");
  } else if constexpr (std::is_integral_v<T>) {
    if (!v.is_number_integer() || (v.is_number_integer() && v.get<long long>() < 0)) {
      throw ConfigError("config field '" + name + "': expected a non-negative integer");
    }
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) throw ConfigError("config field '" + name + "': expected a number");
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!v.is_string()) throw ConfigError("config field '" + name + "': expected a string");
  }
  try {
    out = v.get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config field '" + name + "': wrong type");
  }
}

template <typename T>
void read_list(const json& j, const char* key, std::vector<T>& out) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (!v.is_array()) throw ConfigError(std::string("config field '") + key + "': expected a list");
  try {
    out = v.get<std::vector<T>>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config field '") + key + "': wrong element type");
  }
}

// ---- models of either family ----------------------------------------------

struct AnyModel {
  std::variant<EmqModel, baselines::DirectQuantileModel> model;

  bool is_emq() const { return std::holds_alternative<EmqModel>(model); }
  const QuantileGrid& grid() const {
    return is_emq() ? std::get<EmqModel>(model).grid
                    : std::get<baselines::DirectQuantileModel>(model).grid;
  }
  const data::NormStats& stats() const {
    return is_emq() ? std::get<EmqModel>(model).norm_stats
                    : std::get<baselines::DirectQuantileModel>(model).norm_stats;
  }
  const std::map<std::string, std::string>& metadata() const {
    return is_emq() ? std::get<EmqModel>(model).metadata
                    : std::get<baselines::DirectQuantileModel>(model).metadata;
  }
  std::string meta(const std::string& key) const {
    const auto& m = metadata();
    const auto it = m.find(key);
    return it == m.end() ? std::string() : it->second;
  }
  // Fans for standardized inputs; `initial_only` stops after the Gaussian step.
  Matrix predict(const Matrix& x, bool initial_only, bool sort_baseline) const {
    if (is_emq()) {
      const auto& m = std::get<EmqModel>(model);
      return initial_only ? predict_quantiles(m, x, 0) : predict_quantiles(m, x);
    }
    return baselines::predict(std::get<baselines::DirectQuantileModel>(model), x, sort_baseline);
  }
};

AnyModel load_any_model(const fs::path& path) {
  const std::string magic = io::read_magic(path);
  if (magic == kEmqMagic) return AnyModel{load_model(path)};
  if (magic == baselines::kDirectMagic) return AnyModel{baselines::load_model(path)};
  throw FormatError("'" + path.string() + "' is not a model file (magic '" + magic + "')");
}

void check_raw_dim(const AnyModel& model, const data::Dataset& dataset) {
  const std::string expected = model.meta("raw_feature_count");
  if (!expected.empty() && std::to_string(dataset.dim()) != expected) {
    throw DimensionError("dataset has " + std::to_string(dataset.dim()) +
                         " feature columns, model was trained on " + expected);
  }
}

// ---- training of one cell ---------------------------------------------------

std::string trace_csv(const std::vector<double>& trace, std::size_t t_ada) {
  std::ostringstream out;
  out << "t,val_ece,selected\n";
  for (std::size_t t = 0; t < trace.size(); ++t) {
    out << t << ',' << fmt17(trace[t]) << ',' << (t == t_ada ? 1 : 0) << '\n';
  }
  return out.str();
}

TrainOutcome train_cell(const RunConfig& config, const data::Dataset& dataset,
                        const std::string& variant, std::uint64_t seed, const fs::path& run_dir) {
  fs::create_directories(run_dir);
  fs::remove(run_dir / "FAILED");
  try {
    TrainOutcome outcome;
    outcome.run_dir = run_dir;
    outcome.config_hash = cell_config_hash(config, variant, seed);

    const QuantileGrid grid = config.parsed_grid();
    const auto indices =
        data::split(dataset.size(), config.test_fraction, config.train.val_fraction, seed);
    outcome.split_hash = split_hash(indices);
    const data::PreparedSplit prepared = data::prepare(dataset, indices);
    const TrainingData td = TrainingData::from(prepared.train, prepared.val);
    nn::TrainConfig train_cfg = config.train;
    train_cfg.seed = seed;

    const std::string data_hash = dataset_hash(dataset);
    const std::map<std::string, std::string> model_meta = {
        {"config_sha256", outcome.config_hash},
        {"dataset", dataset.source},
        {"dataset_sha256", data_hash},
        {"raw_feature_count", std::to_string(dataset.dim())},
        {"seed", std::to_string(seed)},
        {"split_sha256", outcome.split_hash},
        {"tool_version", kToolVersion},
        {"variant", variant},
    };

    const fs::path model_path = run_dir / "model.emqm";
    Matrix q_test;
    bool stopped_early = false;
    if (is_emq_variant(variant)) {
      EmqFitOptions options;
      options.train = train_cfg;
      options.step = config.step;
      options.adaptive = config.adaptive;
      options.variant = variant_from_string(variant);
      options.grid = grid;
      EmqModel model = fit_emq(td, options);
      model.norm_stats = prepared.stats;
      model.metadata = model_meta;
      save_model(model, model_path);
      q_test = predict_quantiles(model, prepared.test.features);
      outcome.ece_trace = model.ece_trace;
      outcome.t_ada = model.t_ada();
      outcome.stop_step = model.stop_step;
      stopped_early = model.stopped_early;
    } else {
      baselines::DirectQuantileModel model;
      const auto kind = baselines::loss_kind_from_string(variant);
      if (kind == baselines::LossKind::kVanilla) model = baselines::fit_vanilla_qr(td, train_cfg, grid);
      if (kind == baselines::LossKind::kWeighted) model = baselines::fit_qrw(td, train_cfg, grid);
      if (kind == baselines::LossKind::kIntervalScore) {
        model = baselines::fit_interval_score_model(td, train_cfg, grid);
      }
      model.norm_stats = prepared.stats;
      model.metadata = model_meta;
      baselines::save_model(model, model_path);
      const Matrix q_val = baselines::predict(model, td.x_val, config.sort_baseline_quantiles);
      outcome.ece_trace = {metrics::ece(q_val, td.y_val, grid)};
      q_test = baselines::predict(model, prepared.test.features, config.sort_baseline_quantiles);
    }

    outcome.report = metrics::evaluate(q_test, prepared.test.labels, grid);
    outcome.report.metadata = {
        {"config_sha256", outcome.config_hash},
        {"dataset", dataset.source},
        {"model", variant},
        {"rows", "test"},
        {"seed", std::to_string(seed)},
        {"split_sha256", outcome.split_hash},
    };
    write_text(run_dir / "trace.csv", trace_csv(outcome.ece_trace, outcome.t_ada));
    write_text(run_dir / "report.json", metrics::report_to_json(outcome.report));
    write_text(run_dir / "report.csv", metrics::report_to_csv(outcome.report));

    ordered_json manifest;
    manifest["tool_version"] = kToolVersion;
    manifest["format_version"] = io::kFormatVersion;
    manifest["config_sha256"] = outcome.config_hash;
    RunConfig cell = config;
    cell.variants = {variant};
    cell.seeds = {seed};
    cell.output_dir.clear();
    manifest["config"] = config_to_json(cell);
    manifest["variant"] = variant;
    manifest["seed"] = seed;
    manifest["dataset"] = {{"source", dataset.source},
                           {"sha256", data_hash},
                           {"rows", dataset.size()},
                           {"features", dataset.dim()},
                           {"dropped_rows", dataset.dropped_rows}};
    manifest["split"] = split_to_json(indices);
    manifest["split"]["sha256"] = outcome.split_hash;
    manifest["training"] = {{"trace_length", outcome.ece_trace.size()},
                            {"stop_step", outcome.stop_step},
                            {"stopped_early", stopped_early},
                            {"t_ada", outcome.t_ada}};
    manifest["files"] = {{"model.emqm", sha256_file(model_path)},
                         {"trace.csv", sha256_file(run_dir / "trace.csv")},
                         {"report.json", sha256_file(run_dir / "report.json")},
                         {"report.csv", sha256_file(run_dir / "report.csv")}};
    const std::string manifest_text = manifest.dump(2) + "\n";
    write_text(run_dir / "manifest.json", manifest_text);
    outcome.manifest_hash = sha256_hex(manifest_text);
    return outcome;
  } catch (const std::exception& e) {
    std::ofstream(run_dir / "FAILED", std::ios::trunc) << e.what() << '\n';
    throw;
  }
}

std::vector<std::size_t> all_rows(std::size_t n) {
  std::vector<std::size_t> rows(n);
  for (std::size_t i = 0; i < n; ++i) rows[i] = i;
  return rows;
}

}  // namespace

bool is_emq_variant(const std::string& name) {
  return name == "emq0" || name == "emq" || name == "emqw";
}

bool DataSpec::is_synthetic() const { return source.rfind("synthetic:", 0) == 0; }

void DataSpec::validate() const {
  if (source.empty()) throw ConfigError("config field 'data': no data source given");
  if (!is_synthetic() && label.empty()) {
    throw ConfigError("config field 'label': required for CSV data");
  }
}

data::Dataset load_dataset(const DataSpec& spec) {
  spec.validate();
  if (!spec.is_synthetic()) {
    data::LabelColumn label = spec.label;
    if (all_digits(spec.label)) label = static_cast<std::size_t>(std::stoull(spec.label));
    return data::load_csv(spec.source, label, spec.header);
  }
  // synthetic:<kind>[:n=<rows>][:seed=<seed>]
  std::vector<std::string> parts;
  std::stringstream ss(spec.source);
  for (std::string part; std::getline(ss, part, ':');) parts.push_back(part);
  if (parts.size() < 2) throw ConfigError("data spec '" + spec.source + "': missing generator kind");
  const auto kind = data::synthetic_kind_from_string(parts[1]);
  std::size_t n = 10000;
  std::uint64_t seed = 0;
  for (std::size_t i = 2; i < parts.size(); ++i) {
    const auto eq = parts[i].find('=');
    const std::string key = parts[i].substr(0, eq);
    const std::string value = eq == std::string::npos ? "" : parts[i].substr(eq + 1);
    if (!all_digits(value)) {
      throw ConfigError("data spec '" + spec.source + "': bad value for '" + key + "'");
    }
    if (key == "n") {
      n = std::stoull(value);
    } else if (key == "seed") {
      seed = std::stoull(value);
    } else {
      throw ConfigError("data spec '" + spec.source + "': unknown key '" + key + "'");
    }
  }
  return data::synthesize(kind, n, seed);
}

QuantileGrid RunConfig::parsed_grid() const { return QuantileGrid::parse(grid); }

void RunConfig::validate() const {
  data.validate();
  if (variants.empty()) throw ConfigError("config field 'variants': at least one variant required");
  for (const auto& v : variants) {
    if (std::find(kVariantNames.begin(), kVariantNames.end(), v) == kVariantNames.end()) {
      throw ConfigError("config field 'variants': unknown variant '" + v + "'");
    }
  }
  if (seeds.empty()) throw ConfigError("config field 'seeds': at least one seed required");
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw ConfigError("config field 'test_fraction': must lie in (0, 1)");
  }
  const QuantileGrid g = [&] {
    try {
      return parsed_grid();
    } catch (const Error& e) {
      throw ConfigError(std::string("config field 'grid': ") + e.what());
    }
  }();
  try {
    g.centered_pairs();
  } catch (const Error& e) {
    throw ConfigError(std::string("config field 'grid': ") + e.what());
  }
  for (double tau : metrics::kTailLevels) {
    if (!g.find(tau) || !g.find(1.0 - tau)) {
      throw ConfigError("config field 'grid': tail level " + fmt17(tau) + " is missing");
    }
  }
  const bool wants_is = std::find(variants.begin(), variants.end(), "interval-score") != variants.end();
  if (wants_is && (g.size() % 2 == 0 || !g.find(0.5))) {
    throw ConfigError("config field 'grid': interval-score needs an odd grid containing 0.5");
  }
  auto nested = [](const char* field, auto&& check) {
    try {
      check();
    } catch (const Error& e) {
      throw ConfigError(std::string("config field '") + field + "': " + e.what());
    }
  };
  nested("train", [&] { train.validate(); });
  nested("step", [&] { step.validate(); });
  nested("adaptive", [&] { adaptive.validate(); });
}

RunConfig config_from_json(const json& j) {
  check_keys(j, "",
             {"data", "label", "header", "variants", "grid", "train", "step", "adaptive", "seeds",
              "test_fraction", "output_dir", "sort_baseline_quantiles"});
  RunConfig c;
  read_field(j, "data", "", c.data.source);
  if (j.contains("label")) {
    const json& label = j.at("label");
    if (label.is_number_unsigned()) {
      c.data.label = std::to_string(label.get<std::size_t>());
    } else if (label.is_string()) {
      c.data.label = label.get<std::string>();
    } else {
      throw ConfigError("config field 'label': expected a column name or index");
    }
  }
  read_field(j, "header", "", c.data.header);
  read_list(j, "variants", c.variants);
  read_field(j, "grid", "", c.grid);
  read_list(j, "seeds", c.seeds);
  read_field(j, "test_fraction", "", c.test_fraction);
  read_field(j, "output_dir", "", c.output_dir);
  read_field(j, "sort_baseline_quantiles", "", c.sort_baseline_quantiles);
  if (j.contains("train")) {
    const json& t = j.at("train");
    check_keys(t, "train", {"batch_size", "learning_rate", "max_epochs", "patience", "val_fraction"});
    read_field(t, "batch_size", "train", c.train.batch_size);
    read_field(t, "learning_rate", "train", c.train.learning_rate);
    read_field(t, "max_epochs", "train", c.train.max_epochs);
    read_field(t, "patience", "train", c.train.patience);
    read_field(t, "val_fraction", "train", c.train.val_fraction);
  }
  if (j.contains("step")) {
    const json& s = j.at("step");
    check_keys(s, "step", {"boundary_B", "weak_hidden_sizes"});
    read_field(s, "boundary_B", "step", c.step.boundary_B);
    if (s.contains("weak_hidden_sizes")) read_list(s, "weak_hidden_sizes", c.step.weak_hidden_sizes);
  }
  if (j.contains("adaptive")) {
    const json& a = j.at("adaptive");
    check_keys(a, "adaptive", {"t_max", "t1", "t2"});
    read_field(a, "t_max", "adaptive", c.adaptive.t_max);
    read_field(a, "t1", "adaptive", c.adaptive.t1);
    read_field(a, "t2", "adaptive", c.adaptive.t2);
  }
  return c;
}

json config_to_json(const RunConfig& c) {
  json j;
  j["data"] = c.data.source;
  if (!c.data.label.empty()) j["label"] = c.data.label;
  j["header"] = c.data.header;
  j["variants"] = c.variants;
  j["grid"] = c.grid;
  j["train"] = {{"batch_size", c.train.batch_size},
                {"learning_rate", c.train.learning_rate},
                {"max_epochs", c.train.max_epochs},
                {"patience", c.train.patience},
                {"val_fraction", c.train.val_fraction}};
  j["step"] = {{"boundary_B", c.step.boundary_B},
               {"weak_hidden_sizes", c.step.weak_hidden_sizes}};
  j["adaptive"] = {{"t_max", c.adaptive.t_max}, {"t1", c.adaptive.t1}, {"t2", c.adaptive.t2}};
  j["seeds"] = c.seeds;
  j["test_fraction"] = c.test_fraction;
  if (!c.output_dir.empty()) j["output_dir"] = c.output_dir;
  j["sort_baseline_quantiles"] = c.sort_baseline_quantiles;
  return j;
}

RunConfig load_config(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw ConfigError("config '" + path.string() + "': " + e.what());
  } catch (const DataError& e) {
    throw ConfigError(e.what());
  }
  return config_from_json(j);
}

std::string cell_config_hash(const RunConfig& config, const std::string& variant,
                             std::uint64_t seed) {
  RunConfig cell = config;
  cell.variants = {variant};
  cell.seeds = {seed};
  cell.output_dir.clear();
  return sha256_hex(config_to_json(cell).dump());
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw StateError("sha256: digest failed");
  }
  std::ostringstream out;
  out << std::hex << std::setfill('0');
  for (unsigned int i = 0; i < len; ++i) out << std::setw(2) << static_cast<int>(digest[i]);
  return out.str();
}

std::string sha256_file(const fs::path& path) { return sha256_hex(read_text(path)); }

std::string dataset_hash(const data::Dataset& dataset) {
  std::string bytes;
  const auto append = [&bytes](const void* p, std::size_t n) {
    bytes.append(static_cast<const char*>(p), n);
  };
  const std::uint64_t rows = dataset.size();
  const std::uint64_t cols = dataset.dim();
  append(&rows, sizeof rows);
  append(&cols, sizeof cols);
  append(dataset.features.values().data(), dataset.features.values().size() * sizeof(double));
  append(dataset.labels.data(), dataset.labels.size() * sizeof(double));
  return sha256_hex(bytes);
}

json split_to_json(const data::SplitIndices& indices) {
  return {{"train", indices.train}, {"val", indices.val}, {"test", indices.test}};
}

std::string split_hash(const data::SplitIndices& indices) {
  return sha256_hex(split_to_json(indices).dump());
}

fs::path default_output_root() {
  const char* root = std::getenv(kOutputRootEnv);
  return root && *root ? fs::path(root) : fs::path("runs");
}

TrainOutcome cmd_train(const RunConfig& config, const std::string& variant, std::uint64_t seed,
                       const fs::path& run_dir) {
  config.validate();
  if (std::find(kVariantNames.begin(), kVariantNames.end(), variant) == kVariantNames.end()) {
    throw ConfigError("unknown variant '" + variant + "'");
  }
  const data::Dataset dataset = load_dataset(config.data);
  return train_cell(config, dataset, variant, seed, run_dir);
}

EvaluateOutcome cmd_evaluate(const EvaluateOptions& options) {
  static const std::vector<std::string> kRowChoices = {"test", "val", "train", "all"};
  if (std::find(kRowChoices.begin(), kRowChoices.end(), options.rows) == kRowChoices.end()) {
    throw ConfigError("--rows must be one of test, val, train, all");
  }
  const AnyModel model = load_any_model(options.model_path);
  const data::Dataset dataset = load_dataset(options.data);
  check_raw_dim(model, dataset);

  const fs::path manifest_path =
      options.manifest_path.value_or(options.model_path.parent_path() / "manifest.json");
  std::optional<json> manifest;
  std::string manifest_hash = "none";
  if (fs::exists(manifest_path)) {
    const std::string text = read_text(manifest_path);
    manifest = json::parse(text, nullptr, false);
    if (manifest->is_discarded()) throw FormatError("manifest '" + manifest_path.string() + "' is not JSON");
    manifest_hash = sha256_hex(text);
    const auto files = manifest->value("files", json::object());
    if (files.contains("model.emqm") && files["model.emqm"] != sha256_file(options.model_path)) {
      log::warn("evaluate: model file does not match the checksum recorded in the manifest");
    }
  } else if (options.manifest_path) {
    throw ConfigError("manifest '" + manifest_path.string() + "' not found");
  }

  const std::string data_hash = dataset_hash(dataset);
  const bool training_data = data_hash == model.meta("dataset_sha256");
  std::vector<std::size_t> rows;
  std::string rows_label = options.rows;
  if (!training_data) {
    if (options.rows != "test" && options.rows != "all") {
      throw ConfigError("--rows " + options.rows + " needs the dataset the model was trained on");
    }
    rows = all_rows(dataset.size());
    rows_label = "all (dataset not used for training)";
  } else {
    const bool touches_training = options.rows != "test";
    if (touches_training && !options.allow_train_eval) {
      throw ConfigError("refusing to evaluate on rows the model was fitted on (--rows " +
                        options.rows + "); pass --allow-train-eval to override");
    }
    if (options.rows == "all") {
      rows = all_rows(dataset.size());
    } else if (manifest) {
      try {
        rows = manifest->at("split").at(options.rows).get<std::vector<std::size_t>>();
      } catch (const json::exception& e) {
        throw FormatError(std::string("manifest: no split indices: ") + e.what());
      }
    } else if (options.allow_train_eval) {
      rows = all_rows(dataset.size());
      rows_label = "all (no manifest to locate held-out rows)";
    } else {
      throw ConfigError("model was trained on this dataset but no manifest locates its test rows; "
                        "pass --manifest or --allow-train-eval");
    }
  }
  for (std::size_t r : rows) {
    if (r >= dataset.size()) throw DimensionError("manifest row index out of range for this dataset");
  }

  const data::Dataset selected = model.stats().apply(data::subset(dataset, rows));
  const Matrix q = model.predict(selected.features, false, false);
  EvaluateOutcome outcome;
  outcome.report = metrics::evaluate(q, selected.labels, model.grid());
  outcome.report.metadata = {
      {"config_sha256", model.meta("config_sha256")},
      {"dataset", dataset.source},
      {"manifest_sha256", manifest_hash},
      {"model", model.meta("variant")},
      {"rows", rows_label},
      {"seed", model.meta("seed")},
      {"split_sha256", model.meta("split_sha256")},
  };
  const fs::path out_dir = options.output_dir.value_or(options.model_path.parent_path());
  fs::create_directories(out_dir.empty() ? fs::path(".") : out_dir);
  outcome.json_path = out_dir / "eval_report.json";
  outcome.csv_path = out_dir / "eval_report.csv";
  write_text(outcome.json_path, metrics::report_to_json(outcome.report));
  write_text(outcome.csv_path, metrics::report_to_csv(outcome.report));
  return outcome;
}

BenchmarkOutcome cmd_benchmark(const RunConfig& config, const fs::path& output_dir,
                               std::size_t jobs) {
  config.validate();
  const data::Dataset dataset = load_dataset(config.data);
  fs::create_directories(output_dir);
  fs::remove(output_dir / "PARTIAL");

  BenchmarkOutcome result;
  for (const auto& variant : config.variants) {
    for (std::uint64_t seed : config.seeds) {
      BenchmarkCell cell;
      cell.variant = variant;
      cell.seed = seed;
      result.cells.push_back(cell);
    }
  }

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < result.cells.size(); i = next++) {
      BenchmarkCell& cell = result.cells[i];
      const fs::path dir = output_dir / (cell.variant + "-seed" + std::to_string(cell.seed));
      try {
        cell.outcome = train_cell(config, dataset, cell.variant, cell.seed, dir);
        cell.ok = true;
      } catch (const std::exception& e) {
        cell.error = e.what();
      }
    }
  };
  const std::size_t threads = std::clamp<std::size_t>(jobs, 1, result.cells.size());
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  // Every variant must have seen the same rows for a given seed.
  std::map<std::uint64_t, std::string> split_by_seed;
  for (const auto& cell : result.cells) {
    if (!cell.ok) continue;
    auto [it, inserted] = split_by_seed.emplace(cell.seed, cell.outcome.split_hash);
    if (!inserted && it->second != cell.outcome.split_hash) {
      throw StateError("benchmark: split indices differ between variants for seed " +
                       std::to_string(cell.seed));
    }
  }

  std::ostringstream cells_csv;
  cells_csv << "variant,seed,status,config_sha256,split_sha256,t_ada,eice,eis,tice,ece,error\n";
  for (const auto& cell : result.cells) {
    cells_csv << cell.variant << ',' << cell.seed << ',' << (cell.ok ? "ok" : "FAILED") << ',';
    if (cell.ok) {
      const auto& o = cell.outcome;
      cells_csv << o.config_hash << ',' << o.split_hash << ',' << o.t_ada << ','
                << fmt17(o.report.eice) << ',' << fmt17(o.report.eis) << ','
                << fmt17(o.report.tice) << ',' << fmt17(o.report.ece) << ",\n";
    } else {
      std::string msg = cell.error;
      std::replace(msg.begin(), msg.end(), '"', '\'');
      std::replace(msg.begin(), msg.end(), '\n', ' ');
      cells_csv << ",,,,,,,\"" << msg << "\"\n";
      ++result.failures;
    }
  }

  std::ostringstream agg;
  agg << "variant,runs,failed,eice,eis,tice,ece,eice_x100,eis_x100,tice_x100,ece_x100\n";
  for (const auto& variant : config.variants) {
    double sums[4] = {0, 0, 0, 0};
    std::size_t runs = 0;
    std::size_t failed = 0;
    for (const auto& cell : result.cells) {
      if (cell.variant != variant) continue;
      if (!cell.ok) {
        ++failed;
        continue;
      }
      ++runs;
      sums[0] += cell.outcome.report.eice;
      sums[1] += cell.outcome.report.eis;
      sums[2] += cell.outcome.report.tice;
      sums[3] += cell.outcome.report.ece;
    }
    agg << variant << ',' << runs << ',' << failed;
    for (int m = 0; m < 4; ++m) {
      agg << ',' << (runs ? fmt17(sums[m] / static_cast<double>(runs)) : "nan");
    }
    for (int m = 0; m < 4; ++m) {
      agg << ',' << (runs ? fmt17(sums[m] / static_cast<double>(runs) * 100.0) : "nan");
    }
    agg << '\n';
  }

  result.cells_path = output_dir / "cells.csv";
  result.aggregate_path = output_dir / "aggregate.csv";
  write_text(result.cells_path, cells_csv.str());
  write_text(result.aggregate_path, agg.str());
  if (result.failures > 0) {
    write_text(output_dir / "PARTIAL",
               std::to_string(result.failures) + " of " + std::to_string(result.cells.size()) +
                   " cells failed; see cells.csv\n");
  }
  return result;
}

void cmd_density(const DensityOptions& options) {
  if (options.rows.empty()) throw ConfigError("density: no rows requested");
  const AnyModel model = load_any_model(options.model_path);
  const data::Dataset dataset = load_dataset(options.data);
  check_raw_dim(model, dataset);
  for (std::size_t r : options.rows) {
    if (r >= dataset.size()) {
      throw ConfigError("density: row index " + std::to_string(r) + " out of range (dataset has " +
                        std::to_string(dataset.size()) + " rows)");
    }
  }
  const data::Dataset selected = model.stats().apply(data::subset(dataset, options.rows));
  const Matrix initial = model.predict(selected.features, true, false);
  const Matrix final_fans = model.predict(selected.features, false, false);

  std::ostringstream out;
  out << "row,curve,cell,midpoint,density,width,valid,infinite\n";
  const auto emit = [&](std::size_t i, const char* curve, const Matrix& fans) {
    const auto cells = metrics::implied_density(fans.row(i), model.grid());
    for (std::size_t c = 0; c < cells.size(); ++c) {
      out << options.rows[i] << ',' << curve << ',' << c << ',' << fmt17(cells[c].midpoint) << ','
          << (cells[c].infinite ? "inf" : fmt17(cells[c].density)) << ','
          << fmt17(cells[c].width) << ',' << (cells[c].valid ? 1 : 0) << ','
          << (cells[c].infinite ? 1 : 0) << '\n';
    }
  };
  for (std::size_t i = 0; i < options.rows.size(); ++i) {
    emit(i, "t0", initial);
    emit(i, "final", final_fans);
  }
  if (options.output_path.has_parent_path()) fs::create_directories(options.output_path.parent_path());
  write_text(options.output_path, out.str());
}

std::vector<double> monte_carlo_weights(const QuantileGrid& grid, std::size_t draws,
                                        std::uint64_t seed) {
  if (draws == 0) throw ConfigError("weights: draws must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  const auto& tau = grid.levels();
  const auto& q = grid.normal_scores();
  std::vector<double> sums(grid.size(), 0.0);
  for (std::size_t i = 0; i < draws; ++i) {
    const double z = normal(rng);
    for (std::size_t k = 0; k < tau.size(); ++k) sums[k] += pinball_loss(z, q[k], tau[k]);
  }
  std::vector<double> out;
  for (double s : sums) out.push_back(static_cast<double>(draws) / s);
  return out;
}

std::vector<WeightRow> cmd_weights(const QuantileGrid& grid, bool verify, std::size_t draws,
                                   std::uint64_t seed) {
  const LossWeights w = emqw_weights(grid);
  std::vector<double> mc;
  if (verify) mc = monte_carlo_weights(grid, draws, seed);
  std::vector<WeightRow> rows;
  for (std::size_t k = 0; k < grid.size(); ++k) {
    WeightRow row{grid[k], w.values[k], std::nullopt};
    if (verify) row.monte_carlo = mc[k];
    rows.push_back(row);
  }
  return rows;
}

std::string weights_to_csv(const std::vector<WeightRow>& rows) {
  const bool verify = !rows.empty() && rows.front().monte_carlo.has_value();
  std::ostringstream out;
  out << "tau,weight" << (verify ? ",monte_carlo,rel_diff" : "") << '\n';
  for (const auto& r : rows) {
    out << fmt17(r.tau) << ',' << fmt17(r.weight);
    if (verify) out << ',' << fmt17(*r.monte_carlo) << ',' << fmt17(*r.monte_carlo / r.weight - 1.0);
    out << '\n';
  }
  return out.str();
}

}  // namespace emq::app
