#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "rectflow/tensor.hpp"

namespace rectflow::data {

using Index = std::vector<std::size_t>;

struct Standardization {
  Index kept_columns;         // columns of the raw data that survived
  std::vector<double> mean;   // per kept column
  std::vector<double> scale;  // per kept column, > 0
  std::vector<std::pair<std::size_t, double>> dropped;  // column, constant value
  std::size_t raw_columns = 0;
};

struct Dataset {
  Tensor data;  // [n, D]
  Index train;
  Index val;
  Index test;
  std::optional<Standardization> standardization;
  std::string provenance;
  std::vector<std::string> warnings;

  std::size_t size() const { return data.rows(); }
  std::size_t dim() const { return data.cols(); }
  Tensor train_data() const;
  Tensor val_data() const;
  Tensor test_data() const;
};

Tensor gather_rows(const Tensor& t, const Index& rows);

// Angles drawn by Best-Fisher rejection.
std::vector<double> sample_von_mises(std::size_t n, double loc, double concentration,
                                     std::mt19937_64& rng);
// Points (cos phi, sin phi) on the unit circle, [n, 2].
Tensor sample_von_mises_circle(std::size_t n, double loc, double concentration,
                               std::uint64_t seed);
double von_mises_log_density(double angle, double loc, double concentration);

// Headerless numeric CSV. Rows and columns in errors are 1-based.
Tensor load_csv(const std::string& path);
Tensor parse_csv(const std::string& text);
// An optional header line names the columns.
void write_csv(const std::string& path, const Tensor& t,
               const std::vector<std::string>& header = {});

struct SplitFractions {
  double train = 0.8;
  double val = 0.1;
};
// Seeded shuffle into disjoint, exhaustive train/val/test index sets.
void assign_splits(Dataset& ds, std::uint64_t seed, SplitFractions f = {});

// Z-scores every column (divisor n). Constant columns are dropped and noted
// in `warnings`.
Dataset standardize(const Dataset& ds);
// Back to raw units, restoring dropped constant columns.
Tensor unstandardize(const Standardization& s, const Tensor& x);

// Raw rows into the standardized space of `s`.
Tensor apply_standardization(const Standardization& s, const Tensor& raw);
Dataset load_tabular_csv(const std::string& path, std::uint64_t seed);

}  // namespace rectflow::data
