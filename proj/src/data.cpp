#include "rectflow/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <sstream>

#include "rectflow/errors.hpp"

namespace rectflow::data {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

// log I0(x); the asymptotic series takes over before cyl_bessel_i overflows.
double log_bessel_i0(double x) {
  x = std::abs(x);
  if (x < 500.0) return std::log(std::cyl_bessel_i(0.0, x));
  return x - 0.5 * std::log(2.0 * std::numbers::pi * x) + std::log1p(1.0 / (8.0 * x));
}

}  // namespace

Tensor gather_rows(const Tensor& t, const Index& rows) {
  const std::size_t c = t.cols();
  Tensor out({rows.size(), c});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= t.rows()) throw InputError("row index out of range");
    std::copy_n(t.data() + rows[i] * c, c, out.data() + i * c);
  }
  return out;
}

Tensor Dataset::train_data() const { return gather_rows(data, train); }
Tensor Dataset::val_data() const { return gather_rows(data, val); }
Tensor Dataset::test_data() const { return gather_rows(data, test); }

std::vector<double> sample_von_mises(std::size_t n, double loc, double concentration,
                                     std::mt19937_64& rng) {
  if (!(concentration > 0.0)) throw InputError("von Mises concentration must be positive");
  const double k = concentration;
  const double a = 1.0 + std::sqrt(1.0 + 4.0 * k * k);
  const double b = (a - std::sqrt(2.0 * a)) / (2.0 * k);
  const double r = (1.0 + b * b) / (2.0 * b);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<double> out;
  out.reserve(n);
  while (out.size() < n) {
    const double u1 = unif(rng);
    const double u2 = unif(rng);
    const double u3 = unif(rng);
    const double z = std::cos(std::numbers::pi * u1);
    const double f = (1.0 + r * z) / (r + z);
    const double c = k * (r - f);
    if (c * (2.0 - c) - u2 <= 0.0 && std::log(c / u2) + 1.0 - c < 0.0) continue;
    const double theta = std::acos(std::clamp(f, -1.0, 1.0));
    out.push_back(loc + (u3 > 0.5 ? theta : -theta));
  }
  return out;
}

Tensor sample_von_mises_circle(std::size_t n, double loc, double concentration,
                               std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::vector<double> phi = sample_von_mises(n, loc, concentration, rng);
  Tensor out({n, 2});
  for (std::size_t i = 0; i < n; ++i) {
    out(i, 0) = std::cos(phi[i]);
    out(i, 1) = std::sin(phi[i]);
  }
  return out;
}

double von_mises_log_density(double angle, double loc, double concentration) {
  return concentration * std::cos(angle - loc) - std::log(2.0 * std::numbers::pi) -
         log_bessel_i0(concentration);
}

Tensor parse_csv(const std::string& text) {
  std::vector<double> values;
  std::size_t cols = 0;
  std::size_t rows = 0;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    std::size_t col = 0;
    std::size_t start = 0;
    for (;;) {
      const std::size_t comma = line.find(',', start);
      const std::string cell =
          trim(std::string_view(line).substr(start, comma == std::string::npos
                                                        ? std::string::npos
                                                        : comma - start));
      ++col;
      double v = 0.0;
      const char* first = cell.data();
      const char* last = cell.data() + cell.size();
      auto [ptr, ec] = std::from_chars(first, last, v);
      if (cell.empty() || ec != std::errc() || ptr != last) {
        throw ParseError("non-numeric cell '" + cell + "'", line_no, col);
      }
      values.push_back(v);
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (rows == 0) {
      cols = col;
    } else if (col != cols) {
      throw ParseError("ragged row: expected " + std::to_string(cols) + " columns, found " +
                           std::to_string(col),
                       line_no, std::min(col, cols) + 1);
    }
    ++rows;
  }
  if (rows == 0) throw ParseError("no data rows", 0, 0);
  return Tensor({rows, cols}, std::move(values));
}

Tensor load_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw FileError("cannot open '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_csv(ss.str());
}

void write_csv(const std::string& path, const Tensor& t, const std::vector<std::string>& header) {
  std::ofstream f(path);
  if (!f) throw FileError("cannot write '" + path + "'");
  const std::size_t rows = t.rank() == 1 ? t.size() : t.rows();
  const std::size_t cols = t.rank() == 1 ? 1 : t.cols();
  if (!header.empty()) {
    if (header.size() != cols) throw InputError("CSV header width does not match the data");
    for (std::size_t c = 0; c < cols; ++c) f << (c ? "," : "") << header[c];
    f << '\n';
  }
  f << std::setprecision(17);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) f << (c ? "," : "") << t[r * cols + c];
    f << '\n';
  }
}

void assign_splits(Dataset& ds, std::uint64_t seed, SplitFractions fr) {
  if (fr.train < 0 || fr.val < 0 || fr.train + fr.val > 1.0) {
    throw InputError("split fractions must be nonnegative and sum to at most 1");
  }
  const std::size_t n = ds.size();
  Index idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::floor(fr.train * n));
  const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::floor(fr.val * n)));
  ds.train.assign(idx.begin(), idx.begin() + n_train);
  ds.val.assign(idx.begin() + n_train, idx.begin() + n_train + n_val);
  ds.test.assign(idx.begin() + n_train + n_val, idx.end());
}

Dataset standardize(const Dataset& ds) {
  const std::size_t n = ds.size();
  const std::size_t D = ds.dim();
  if (n < 2) throw InputError("standardization needs at least two rows");
  Standardization s;
  s.raw_columns = D;
  Dataset out = ds;
  for (std::size_t c = 0; c < D; ++c) {
    double mean = 0.0;
    for (std::size_t r = 0; r < n; ++r) mean += ds.data(r, c);
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t r = 0; r < n; ++r) var += (ds.data(r, c) - mean) * (ds.data(r, c) - mean);
    const double sd = std::sqrt(var / static_cast<double>(n));
    if (!(sd > 1e-12 * std::max(1.0, std::abs(mean)))) {
      s.dropped.push_back({c, mean});
      out.warnings.push_back("dropping constant column " + std::to_string(c + 1));
      continue;
    }
    s.kept_columns.push_back(c);
    s.mean.push_back(mean);
    s.scale.push_back(sd);
  }
  if (s.kept_columns.empty()) throw InputError("every column is constant");
  Tensor z({n, s.kept_columns.size()});
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < s.kept_columns.size(); ++j) {
      z(r, j) = (ds.data(r, s.kept_columns[j]) - s.mean[j]) / s.scale[j];
    }
  }
  out.data = std::move(z);
  out.standardization = std::move(s);
  return out;
}

Tensor unstandardize(const Standardization& s, const Tensor& x) {
  if (x.cols() != s.kept_columns.size()) throw InputError("data width differs from the standardization");
  const std::size_t n = x.rows();
  Tensor out({n, s.raw_columns});
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < s.kept_columns.size(); ++j) {
      out(r, s.kept_columns[j]) = x(r, j) * s.scale[j] + s.mean[j];
    }
    for (const auto& [c, v] : s.dropped) out(r, c) = v;
  }
  return out;
}

Tensor apply_standardization(const Standardization& s, const Tensor& raw) {
  if (raw.rank() != 2 || raw.cols() != s.raw_columns) {
    throw InputError("data has " + std::to_string(raw.rank() == 2 ? raw.cols() : 0) +
                     " columns, expected " + std::to_string(s.raw_columns));
  }
  Tensor out({raw.rows(), s.kept_columns.size()});
  for (std::size_t r = 0; r < raw.rows(); ++r) {
    for (std::size_t j = 0; j < s.kept_columns.size(); ++j) {
      out(r, j) = (raw(r, s.kept_columns[j]) - s.mean[j]) / s.scale[j];
    }
  }
  return out;
}

Dataset load_tabular_csv(const std::string& path, std::uint64_t seed) {
  Dataset ds;
  ds.data = load_csv(path);
  ds.provenance = "csv:" + path;
  ds = standardize(ds);
  assign_splits(ds, seed);
  return ds;
}

}  // namespace rectflow::data
