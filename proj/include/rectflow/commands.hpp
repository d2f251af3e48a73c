#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <string>

#include "rectflow/config.hpp"

namespace rectflow::app {

enum ExitCode : int {
  kExitOk = 0,
  kExitCheckFailed = 1,
  kExitUsage = 2,
  kExitFile = 3,
  kExitVersion = 4,
  kExitNumeric = 5,
};

// Runs `body`, mapping library exceptions to exit codes and printing the
// message to `err`.
int run_guarded(const std::function<int()>& body, std::ostream& err);

struct SimulateOptions {
  std::size_t n = 10000;
  double loc = 1.5707963267948966;
  double concentration = 1.0;
  std::uint64_t seed = 0;
  std::string out = "circle.csv";
};
int cmd_simulate(const SimulateOptions& opt, std::ostream& log);

// Writes model.ckpt, metrics.csv, config.json and summary.json.
int cmd_train(const ExperimentConfig& cfg, const std::string& out_dir, std::ostream& log,
              bool verbose = true);

// Without `data_csv` the test split of the checkpoint's dataset is used.
// Writes eval.json and eval_points.csv.
int cmd_eval(const std::string& checkpoint, const std::string& data_csv,
             const std::string& out_dir, std::ostream& log);

int cmd_sample(const std::string& checkpoint, std::size_t n, std::optional<std::uint64_t> seed,
               const std::string& out_csv, std::ostream& log);

// Writes ood_report.json, ood_loglik_histogram.csv and ood_recon_histogram.csv.
int cmd_ood(const std::string& checkpoint, const std::string& in_csv, const std::string& out_csv,
            std::size_t bins, const std::string& out_dir, std::ostream& log);

// The grid lives in the domain of f = high o pad.
struct SpeedOptions {
  double lo = -3.0;
  double hi = 3.0;
  std::size_t points = 1000;
  std::string out_csv = "speed.csv";
};
int cmd_speed(const std::string& checkpoint, const SpeedOptions& opt, std::ostream& log);

// Finite-difference and unbiasedness checks on a small model. Returns
// kExitCheckFailed if any suite fails.
int cmd_gradcheck(const std::optional<ExperimentConfig>& cfg, std::ostream& log,
                  std::size_t probes = 4000);

}  // namespace rectflow::app
