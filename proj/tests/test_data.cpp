#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>

#include "doctest.h"
#include "rectflow/data.hpp"
#include "rectflow/errors.hpp"

using namespace rectflow;
using namespace rectflow::data;

namespace {

std::string temp_file(const std::string& name, const std::string& contents) {
  const auto path = std::filesystem::temp_directory_path() / ("rectflow_test_" + name);
  std::ofstream(path) << contents;
  return path.string();
}

}  // namespace

TEST_CASE("von Mises circle samples") {
  Tensor x = sample_von_mises_circle(5000, std::numbers::pi / 2, 1.0, 7);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    CHECK(std::abs(x(i, 0) * x(i, 0) + x(i, 1) * x(i, 1) - 1.0) < 1e-12);
  }
  Tensor again = sample_von_mises_circle(5000, std::numbers::pi / 2, 1.0, 7);
  CHECK(x.storage() == again.storage());
}

TEST_CASE("von Mises circular mean for high concentration") {
  const std::size_t n = 100000;
  Tensor x = sample_von_mises_circle(n, std::numbers::pi / 2, 100.0, 3);
  double c = 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    c += x(i, 0);
    s += x(i, 1);
  }
  CHECK(std::abs(std::atan2(s, c) - std::numbers::pi / 2) < 0.02);
}

TEST_CASE("von Mises angles follow the density") {
  // Probability of |phi - loc| < 1 by midpoint quadrature of the density.
  const double k = 2.0;
  double p = 0.0;
  const int m = 20000;
  for (int i = 0; i < m; ++i) {
    const double a = -1.0 + (i + 0.5) * 2.0 / m;
    p += std::exp(von_mises_log_density(a, 0.0, k)) * 2.0 / m;
  }
  std::mt19937_64 rng(5);
  const std::size_t n = 100000;
  std::vector<double> phi = sample_von_mises(n, 0.0, k, rng);
  double hits = 0.0;
  for (double a : phi) hits += std::abs(a) < 1.0;
  CHECK(std::abs(hits / n - p) < 4.0 * std::sqrt(p * (1 - p) / n));
  CHECK_THROWS_AS(sample_von_mises(3, 0.0, 0.0, rng), InputError);
}

TEST_CASE("CSV parsing") {
  Tensor t = parse_csv("1,2\n3,4");
  CHECK(t.shape() == Tensor::Shape{2, 2});
  CHECK(t.storage() == std::vector<double>{1, 2, 3, 4});
  CHECK(parse_csv(" 1.5e-3 , -2\n\n4,5\n").storage() == std::vector<double>{1.5e-3, -2, 4, 5});

  try {
    parse_csv("1,2\n3,x\n");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.row() == 2);
    CHECK(e.column() == 2);
  }
  try {
    parse_csv("1,2\n3,4,5\n");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.row() == 2);
  }
  CHECK_THROWS_AS(parse_csv("1,,2\n"), ParseError);
  CHECK_THROWS_AS(load_csv("/nonexistent/file.csv"), FileError);
}

TEST_CASE("CSV write and reload") {
  Tensor t = Tensor::matrix({{0.1, 1.0 / 3.0}, {-2.5e-10, 7.0}});
  const auto path = temp_file("write.csv", "");
  write_csv(path, t);
  CHECK(load_csv(path).storage() == t.storage());
  write_csv(path, t, {"a", "b"});
  std::ifstream f(path);
  std::string first;
  std::getline(f, first);
  CHECK(first == "a,b");
}

TEST_CASE("standardization and round trip") {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> nd(3.0, 2.0);
  Dataset ds;
  ds.data = Tensor({200, 4});
  for (std::size_t r = 0; r < 200; ++r) {
    ds.data(r, 0) = nd(rng);
    ds.data(r, 1) = 5.0;  // constant
    ds.data(r, 2) = 100.0 * nd(rng);
    ds.data(r, 3) = nd(rng) - 50.0;
  }
  Dataset z = standardize(ds);
  CHECK(z.dim() == 3);
  CHECK(z.warnings.size() == 1);
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0.0;
    double v = 0.0;
    for (std::size_t r = 0; r < 200; ++r) m += z.data(r, c) / 200.0;
    for (std::size_t r = 0; r < 200; ++r) v += (z.data(r, c) - m) * (z.data(r, c) - m) / 200.0;
    CHECK(std::abs(m) < 1e-10);
    CHECK(std::abs(std::sqrt(v) - 1.0) < 1e-10);
  }
  Tensor back = unstandardize(*z.standardization, z.data);
  CHECK(max_abs_diff(back, ds.data) < 1e-10 * 300.0);
  double worst = 0.0;
  for (std::size_t i = 0; i < back.size(); ++i) {
    worst = std::max(worst, std::abs(back[i] - ds.data[i]) / std::max(1.0, std::abs(ds.data[i])));
  }
  CHECK(worst < 1e-10);
}

TEST_CASE("splits are disjoint, exhaustive and seeded") {
  Dataset ds;
  ds.data = Tensor({101, 2});
  assign_splits(ds, 9);
  CHECK(ds.train.size() == 80);
  CHECK(ds.val.size() == 10);
  CHECK(ds.test.size() == 11);
  std::set<std::size_t> all(ds.train.begin(), ds.train.end());
  all.insert(ds.val.begin(), ds.val.end());
  all.insert(ds.test.begin(), ds.test.end());
  CHECK(all.size() == 101);
  Dataset again;
  again.data = Tensor({101, 2});
  assign_splits(again, 9);
  CHECK(again.train == ds.train);
  CHECK(again.test == ds.test);
}

TEST_CASE("load_tabular_csv") {
  std::string text;
  for (int i = 0; i < 50; ++i) text += std::to_string(i) + "," + std::to_string(i * i) + ",1\n";
  Dataset ds = load_tabular_csv(temp_file("tab.csv", text), 1);
  CHECK(ds.dim() == 2);
  CHECK(ds.train.size() == 40);
  CHECK(ds.train_data().rows() == 40);
  CHECK(!ds.warnings.empty());
}
