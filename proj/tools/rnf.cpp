#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "rectflow/commands.hpp"
#include "rectflow/errors.hpp"

using namespace rectflow;
using namespace rectflow::app;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FileError("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct ConfigArgs {
  std::string path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> max_epochs;
  std::string method;

  void attach(CLI::App* cmd) {
    cmd->add_option("-c,--config", path, "JSON experiment config");
    cmd->add_option("--set", sets, "Override a config key, e.g. --set estimator.K=4");
    cmd->add_option("--seed", seed, "Override the seed");
    cmd->add_option("--max-epochs", max_epochs, "Override max_epochs");
    cmd->add_option("--method", method, "Override the method (ml | two_step)");
  }

  bool given() const { return !path.empty() || !sets.empty() || seed || max_epochs || !method.empty(); }

  ExperimentConfig load() const {
    std::vector<std::string> all = sets;
    if (seed) all.push_back("seed=" + std::to_string(*seed));
    if (max_epochs) all.push_back("max_epochs=" + std::to_string(*max_epochs));
    if (!method.empty()) all.push_back("method=\"" + method + "\"");
    return parse_config(apply_overrides(path.empty() ? "" : read_file(path), all));
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Rectangular normalizing flows"};
  app.require_subcommand(1);
  std::string output_dir;
  app.add_option("-o,--output-dir", output_dir, "Output directory (beats RNF_OUTPUT_DIR and the config)");

  SimulateOptions sim;
  auto* simulate = app.add_subcommand("simulate", "Write von Mises circle samples as CSV");
  simulate->add_option("-n", sim.n, "Number of points")->capture_default_str();
  simulate->add_option("--loc", sim.loc, "Mean angle")->capture_default_str();
  simulate->add_option("--concentration", sim.concentration, "von Mises concentration")->capture_default_str();
  simulate->add_option("--seed", sim.seed)->capture_default_str();
  simulate->add_option("--out", sim.out, "Output CSV")->capture_default_str();

  ConfigArgs train_args;
  bool quiet = false;
  auto* train = app.add_subcommand("train", "Fit a model and write a checkpoint");
  train_args.attach(train);
  train->add_flag("-q,--quiet", quiet, "Only print the summary");

  std::string checkpoint;
  std::string data_csv;
  auto* eval = app.add_subcommand("eval", "Log-likelihoods, reconstruction errors and FID-like score");
  eval->add_option("checkpoint", checkpoint)->required();
  eval->add_option("--data", data_csv, "CSV to evaluate (default: the test split)");

  std::size_t n_samples = 1000;
  std::optional<std::uint64_t> sample_seed;
  std::string sample_out = "samples.csv";
  auto* sample = app.add_subcommand("sample", "Draw samples from a checkpoint");
  sample->add_option("checkpoint", checkpoint)->required();
  sample->add_option("-n", n_samples)->capture_default_str();
  sample->add_option("--seed", sample_seed, "Reseed instead of using the stored RNG state");
  sample->add_option("--out", sample_out)->capture_default_str();

  std::string in_csv;
  std::string out_csv;
  std::size_t bins = 50;
  auto* ood = app.add_subcommand("ood", "Decision stump on log-likelihoods of two datasets");
  ood->add_option("checkpoint", checkpoint)->required();
  ood->add_option("--in", in_csv, "In-distribution CSV")->required();
  ood->add_option("--out", out_csv, "Out-of-distribution CSV")->required();
  ood->add_option("--bins", bins)->capture_default_str();

  SpeedOptions speed_opt;
  auto* speed = app.add_subcommand("speed", "Distances between images of a uniform grid");
  speed->add_option("checkpoint", checkpoint)->required();
  speed->add_option("--lo", speed_opt.lo, "Grid start")->capture_default_str();
  speed->add_option("--hi", speed_opt.hi, "Grid end")->capture_default_str();
  speed->add_option("--points", speed_opt.points)->capture_default_str();
  speed->add_option("--out", speed_opt.out_csv)->capture_default_str();

  ConfigArgs check_args;
  std::size_t probes = 4000;
  auto* gradcheck = app.add_subcommand("gradcheck", "Gradient and estimator self-checks");
  check_args.attach(gradcheck);
  gradcheck->add_option("--probes", probes, "Samples for the unbiasedness suites")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  auto out_dir_for = [&](const std::string& fallback) {
    if (!output_dir.empty()) return output_dir;
    if (const char* env = std::getenv("RNF_OUTPUT_DIR"); env && *env) return std::string(env);
    return fallback;
  };
  auto checkpoint_dir = [&] {
    std::string dir = std::filesystem::path(checkpoint).parent_path().string();
    return out_dir_for(dir.empty() ? "." : dir);
  };
  auto in_dir = [&](const std::string& file) {
    if (std::filesystem::path(file).has_parent_path()) return file;
    return (std::filesystem::path(checkpoint_dir()) / file).string();
  };

  return run_guarded(
      [&]() -> int {
        if (*simulate) return cmd_simulate(sim, std::cout);
        if (*train) {
          ExperimentConfig cfg = train_args.load();
          return cmd_train(cfg, out_dir_for(cfg.output_dir), std::cout, !quiet);
        }
        if (*eval) return cmd_eval(checkpoint, data_csv, checkpoint_dir(), std::cout);
        if (*sample) return cmd_sample(checkpoint, n_samples, sample_seed, in_dir(sample_out), std::cout);
        if (*ood) return cmd_ood(checkpoint, in_csv, out_csv, bins, checkpoint_dir(), std::cout);
        if (*speed) {
          speed_opt.out_csv = in_dir(speed_opt.out_csv);
          return cmd_speed(checkpoint, speed_opt, std::cout);
        }
        if (*gradcheck) {
          std::optional<ExperimentConfig> cfg;
          if (check_args.given()) cfg = check_args.load();
          return cmd_gradcheck(cfg, std::cout, probes);
        }
        return kExitUsage;
      },
      std::cerr);
}
