#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "emq/data.hpp"
#include "emq/error.hpp"
#include "emq/log.hpp"
#include "emq/quantile.hpp"
#include "oracles.hpp"

using namespace emq;
namespace fs = std::filesystem;

namespace {

fs::path write_file(const std::string& name, const std::string& text) {
  const fs::path dir = fs::temp_directory_path() / "emq_test_data";
  fs::create_directories(dir);
  const fs::path path = dir / name;
  std::ofstream(path) << text;
  return path;
}

std::string numeric_csv(std::size_t rows, std::size_t nan_every = 0) {
  std::string text = "a,b,target\n";
  for (std::size_t i = 0; i < rows; ++i) {
    const bool missing = nan_every != 0 && i % nan_every == 0;
    text += std::to_string(i) + "," + (missing ? "NaN" : std::to_string(0.5 * i)) + "," +
            std::to_string(2.0 * i + 1.0) + "\n";
  }
  return text;
}

data::Dataset column_dataset(const std::vector<double>& labels) {
  data::Dataset ds;
  ds.labels = labels;
  ds.features = Matrix(labels.size(), 1);
  for (std::size_t i = 0; i < labels.size(); ++i) ds.features(i, 0) = static_cast<double>(i * i);
  return ds;
}

double mean(std::span<const double> v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

TEST_CASE("load_csv basics") {
  const auto path = write_file("basic.csv", numeric_csv(30));
  const auto by_name = data::load_csv(path, std::string("target"));
  CHECK(by_name.dim() == 2);
  CHECK(by_name.size() == 30);
  CHECK(by_name.feature_names == std::vector<std::string>{"a", "b"});
  CHECK(by_name.label_name == "target");
  CHECK(by_name.labels[3] == 7.0);
  CHECK(by_name.features(3, 1) == 1.5);

  const auto by_index = data::load_csv(path, std::size_t{2});
  CHECK(by_index.labels == by_name.labels);
  CHECK(by_index.features.values().size() == by_name.features.values().size());
  CHECK(std::equal(by_index.features.values().begin(), by_index.features.values().end(),
                   by_name.features.values().begin()));

  // Label in the middle: the remaining columns keep their order.
  const auto middle = data::load_csv(path, std::string("b"));
  CHECK(middle.feature_names == std::vector<std::string>{"a", "target"});
}

TEST_CASE("load_csv drops rows with missing values") {
  log::ScopedSink quiet([](const std::string&) {});
  const auto ds = data::load_csv(write_file("nan.csv", numeric_csv(100, 20)), std::string("target"));
  CHECK(ds.size() == 95);
  CHECK(ds.dropped_rows == 5);

  std::string text = "x,y\n";
  for (int i = 0; i < 12; ++i) text += (i == 3 ? std::string("NA") : std::to_string(i)) + "," + std::to_string(i) + "\n";
  text += "?,1\n,2\n";
  const auto other = data::load_csv(write_file("na.csv", text), std::string("y"));
  CHECK(other.size() == 11);
  CHECK(other.dropped_rows == 3);
}

TEST_CASE("load_csv errors") {
  std::string bad = numeric_csv(20);
  bad += "1,abc,3\n";
  try {
    data::load_csv(write_file("bad.csv", bad), std::string("target"));
    FAIL("expected a DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("'b'") != std::string::npos);
  }
  CHECK_THROWS_AS(data::load_csv(write_file("ok.csv", numeric_csv(20)), std::string("nope")), DataError);
  CHECK_THROWS_AS(data::load_csv(write_file("ok.csv", numeric_csv(20)), std::size_t{3}), DataError);
  CHECK_THROWS_AS(data::load_csv(write_file("empty.csv", ""), std::string("target")), DataError);
  CHECK_THROWS_AS(data::load_csv(write_file("header_only.csv", "a,target\n"), std::string("target")),
                  DataError);
  CHECK_THROWS_AS(data::load_csv(write_file("short.csv", numeric_csv(5)), std::string("target")), DataError);
  CHECK_THROWS_AS(data::load_csv(write_file("ragged.csv", numeric_csv(20) + "1,2\n"), std::string("target")),
                  DataError);
  CHECK_THROWS_AS(data::load_csv(fs::temp_directory_path() / "emq_test_data" / "absent.csv",
                                 std::string("target")),
                  DataError);
}

TEST_CASE("load_csv quoting and headerless files") {
  std::string text = "\"first, name\",\"target\"\n";
  for (int i = 0; i < 12; ++i) text += "\"" + std::to_string(i) + "\"," + std::to_string(i * 3) + "\r\n";
  const auto ds = data::load_csv(write_file("quoted.csv", text), std::string("target"));
  CHECK(ds.feature_names == std::vector<std::string>{"first, name"});
  CHECK(ds.features(11, 0) == 11.0);
  CHECK(ds.labels[11] == 33.0);

  std::string plain;
  for (int i = 0; i < 12; ++i) plain += std::to_string(i) + "," + std::to_string(-i) + "\n";
  const auto headless = data::load_csv(write_file("plain.csv", plain), std::size_t{0}, false);
  CHECK(headless.size() == 12);
  CHECK(headless.labels[5] == 5.0);
  CHECK(headless.features(5, 0) == -5.0);
}

TEST_CASE("standardize") {
  const auto train = column_dataset({1.0, 2.0, 3.0});
  const auto out = data::standardize(train, std::vector<data::Dataset>{train});
  CHECK(out.datasets[0].labels == std::vector<double>{-1.0, 0.0, 1.0});
  CHECK(out.stats.label_mean == 2.0);
  CHECK(out.stats.label_std == 1.0);

  const auto ds = data::synthesize(data::SyntheticKind::kSkewed, 500, 3);
  const auto st = data::standardize(ds, std::vector<data::Dataset>{ds});
  const auto& z = st.datasets[0];
  CHECK(std::abs(mean(z.labels)) < 1e-12);
  for (std::size_t c = 0; c < z.dim(); ++c) {
    std::vector<double> column(z.size());
    for (std::size_t r = 0; r < z.size(); ++r) column[r] = z.features(r, c);
    CHECK(std::abs(mean(column)) < 1e-12);
    double ss = 0.0;
    for (double v : column) ss += v * v;
    CHECK(ss / static_cast<double>(column.size() - 1) == doctest::Approx(1.0).epsilon(1e-12));
  }

  const auto labels_back = st.stats.labels_to_raw(z.labels);
  const Matrix features_back = st.stats.features_to_raw(z.features);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    CHECK(std::abs(labels_back[i] - ds.labels[i]) < 1e-10);
    CHECK(std::abs(features_back(i, 0) - ds.features(i, 0)) < 1e-10);
    CHECK(std::abs(features_back(i, 1) - ds.features(i, 1)) < 1e-10);
  }
}

TEST_CASE("standardize drops constant features and rejects a constant label") {
  std::vector<std::string> warnings;
  log::ScopedSink sink([&](const std::string& m) { warnings.push_back(m); });
  data::Dataset ds = data::synthesize(data::SyntheticKind::kHeteroGaussian, 50, 1);
  Matrix widened(ds.size(), 3);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    widened(i, 0) = ds.features(i, 0);
    widened(i, 1) = 4.0;
    widened(i, 2) = ds.features(i, 1);
  }
  ds.features = widened;
  ds.feature_names = {"x1", "flat", "x2"};
  const auto stats = data::fit_norm_stats(ds);
  CHECK(stats.kept_features == std::vector<std::size_t>{0, 2});
  CHECK(stats.input_dim() == 2);
  CHECK(stats.apply(ds).dim() == 2);
  REQUIRE(warnings.size() == 1);
  CHECK(warnings[0].find("flat") != std::string::npos);

  CHECK_THROWS_AS(data::fit_norm_stats(column_dataset(std::vector<double>(10, 2.0))), DataError);
}

TEST_CASE("split") {
  const auto nested = data::split(100, 0.2, 0.2, 7);
  CHECK(nested.test.size() == 20);
  CHECK(nested.train.size() + nested.val.size() == 80);
  CHECK(nested.val.size() == 16);
  CHECK(nested.train.size() == 64);
  std::set<std::size_t> all;
  for (const auto* part : {&nested.train, &nested.val, &nested.test}) {
    CHECK(std::is_sorted(part->begin(), part->end()));
    all.insert(part->begin(), part->end());
  }
  CHECK(all.size() == 100);
  CHECK(*all.rbegin() == 99);

  CHECK(data::split(100, 0.2, 0.2, 7) == nested);
  CHECK(data::split(100, 0.2, 0.2, 1).test != data::split(100, 0.2, 0.2, 2).test);

  CHECK_THROWS_AS(data::split(100, 0.0, 0.2, 1), ConfigError);
  CHECK_THROWS_AS(data::split(100, 1.0, 0.2, 1), ConfigError);
  CHECK_THROWS_AS(data::split(100, 0.2, 1.0, 1), ConfigError);
  CHECK_THROWS_AS(data::split(100, 0.2, 0.0, 1), ConfigError);
  CHECK_THROWS_AS(data::split(3, 0.1, 0.2, 1), DataError);
}

TEST_CASE("prepare standardizes with the whole training portion") {
  const auto ds = data::synthesize(data::SyntheticKind::kBimodal, 400, 9);
  const auto idx = data::split(ds.size(), 0.2, 0.2, 9);
  const auto prepared = data::prepare(ds, idx);
  CHECK(prepared.train.size() == idx.train.size());
  CHECK(prepared.val.size() == idx.val.size());
  CHECK(prepared.test.size() == idx.test.size());

  std::vector<std::size_t> portion = idx.train;
  portion.insert(portion.end(), idx.val.begin(), idx.val.end());
  std::sort(portion.begin(), portion.end());
  CHECK(prepared.stats == data::fit_norm_stats(data::subset(ds, portion)));
  CHECK(prepared.test.labels[0] ==
        doctest::Approx((ds.labels[idx.test[0]] - prepared.stats.label_mean) / prepared.stats.label_std));
}

TEST_CASE("synthetic generators and their oracles") {
  CHECK(data::synthetic_kind_from_string("hetero-gaussian") == data::SyntheticKind::kHeteroGaussian);
  CHECK(data::synthetic_kind_from_string("skewed") == data::SyntheticKind::kSkewed);
  CHECK(data::synthetic_kind_from_string("bimodal") == data::SyntheticKind::kBimodal);
  CHECK_THROWS_AS(data::synthetic_kind_from_string("trimodal"), ConfigError);

  const data::SyntheticLaw hetero(data::SyntheticKind::kHeteroGaussian);
  const std::vector<double> x{0.7, 1.0};
  CHECK(hetero.quantile(0.5, x) == 0.7);
  CHECK(hetero.quantile(0.975, x) == doctest::Approx(0.7 + 2.0 * 1.959964).epsilon(1e-6));
  CHECK(std::abs(hetero.quantile(0.975, x) - (0.7 + 2.0 * oracle::normal_quantile(0.975))) < 1e-12);

  const data::SyntheticLaw skewed(data::SyntheticKind::kSkewed);
  // Median of exp(eps / 2) is 1, its mean exp(1/8).
  CHECK(skewed.quantile(0.5, x) == doctest::Approx(0.7 + 1.0 - std::exp(0.125)).epsilon(1e-14));

  const QuantileGrid g = QuantileGrid::percent99();
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  for (auto kind : {data::SyntheticKind::kHeteroGaussian, data::SyntheticKind::kSkewed,
                    data::SyntheticKind::kBimodal}) {
    const data::SyntheticLaw law(kind);
    for (int trial = 0; trial < 40; ++trial) {
      const std::vector<double> xi{u(rng), u(rng)};
      double previous = -1e300;
      for (double tau : g.levels()) {
        const double q = law.quantile(tau, xi);
        CHECK(q > previous);
        CHECK(std::abs(law.cdf(q, xi) - tau) < 1e-8);
        previous = q;
      }
    }
  }

  // The bimodal CDF against its mixture definition.
  const data::SyntheticLaw bimodal(data::SyntheticKind::kBimodal);
  const double p = 1.0 / (1.0 + std::exp(-2.0 * x[1]));
  const double y = 1.1;
  CHECK(bimodal.cdf(y, x) == doctest::Approx(p * oracle::normal_cdf((y - 0.7 - 2.0) / 0.3) +
                                             (1.0 - p) * oracle::normal_cdf((y - 0.7 + 2.0) / 0.3))
                                 .epsilon(1e-13));
}

TEST_CASE("synthesize draws from the stated law") {
  const auto a = data::synthesize(data::SyntheticKind::kHeteroGaussian, 50000, 11);
  const auto b = data::synthesize(data::SyntheticKind::kHeteroGaussian, 50000, 11);
  CHECK(a.labels == b.labels);
  CHECK(data::synthesize(data::SyntheticKind::kHeteroGaussian, 50000, 12).labels != a.labels);
  CHECK(a.dim() == 2);
  CHECK(a.source == "synthetic:hetero-gaussian:n=50000:seed=11");
  CHECK(std::all_of(a.features.values().begin(), a.features.values().end(),
                    [](double v) { return v >= -2.0 && v <= 2.0; }));
  CHECK_THROWS_AS(data::synthesize(data::SyntheticKind::kSkewed, 5, 0), DataError);

  for (auto kind : {data::SyntheticKind::kHeteroGaussian, data::SyntheticKind::kSkewed,
                    data::SyntheticKind::kBimodal}) {
    CAPTURE(data::to_string(kind));
    const auto ds = data::synthesize(kind, 50000, 2);
    const data::SyntheticLaw law(kind);
    // Probability integral transform: F(y | x) should be uniform.
    std::vector<double> pit;
    for (std::size_t i = 0; i < ds.size(); ++i) pit.push_back(law.cdf(ds.labels[i], ds.features.row(i)));
    for (double level : {0.1, 0.25, 0.5, 0.75, 0.9}) {
      const auto below = std::count_if(pit.begin(), pit.end(), [&](double v) { return v <= level; });
      CHECK(std::abs(static_cast<double>(below) / 50000.0 - level) < 0.01);
    }
  }
}
