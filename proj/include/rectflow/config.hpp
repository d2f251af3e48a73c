#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rectflow/data.hpp"
#include "rectflow/rectangular.hpp"
#include "rectflow/training.hpp"

namespace rectflow::app {

struct DatasetSpec {
  enum class Kind { VonMises, Csv };
  Kind kind = Kind::VonMises;
  std::size_t n_train = 10000;
  std::size_t n_val = 1000;
  std::size_t n_test = 1000;
  double loc = 1.5707963267948966;
  double concentration = 1.0;
  std::string path;
};

struct ExperimentConfig {
  train::Method method = train::Method::ML;
  est::GradEstimator estimator = est::ExactEstimator{};
  std::size_t D = 2;
  std::size_t d = 1;
  flows::RealNvpSpec high{5, {10, 10}, true};
  rect::LowFlowSpec low{};
  double beta = 50.0;
  train::Annealing anneal{true, 500.0, 1000.0};
  double lr = 1e-3;
  std::size_t batch_size = 1000;
  std::size_t patience = 50;
  std::size_t max_epochs = 5000;
  train::EarlyStop early_stop = train::EarlyStop::FullObjective;
  std::uint64_t seed = 0;
  DatasetSpec dataset{};
  std::string output_dir = "rnf_out";
  double jitter = 0.0;

  rect::RectSpec rect_spec() const;
  train::TrainConfig train_config() const;
};

// Parses and validates a JSON document. Unknown keys, wrong types and out of
// range values raise InputError naming the key.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::string& path);
std::string to_json(const ExperimentConfig& cfg);

// Applies "dotted.key=value" overrides to a JSON document before parsing.
// The value is read as JSON when possible and as a string otherwise.
std::string apply_overrides(const std::string& json_text, const std::vector<std::string>& sets);

// Directory for outputs: RNF_OUTPUT_DIR if set, else the configured one.
std::string resolve_output_dir(const ExperimentConfig& cfg);

// Train/val/test splits for the configured dataset, plus the standardization
// applied to CSV data.
data::Dataset make_dataset(const ExperimentConfig& cfg);

}  // namespace rectflow::app
