#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "rectflow/estimators.hpp"
#include "rectflow/rectangular.hpp"

namespace rectflow::train {

enum class Method { ML, TwoStep };
enum class EarlyStop { FullObjective, FidLike };

Method parse_method(const std::string& name);
std::string to_string(Method m);
EarlyStop parse_early_stop(const std::string& name);
std::string to_string(EarlyStop e);

struct Annealing {
  bool enabled = true;
  double start = 500.0;  // likelihood weight 0 before this epoch
  double end = 1000.0;   // and 1 from this epoch on
};

struct ObjectiveConfig {
  Method method = Method::ML;
  double beta = 50.0;
  Annealing anneal{};
  est::GradEstimator estimator = est::ExactEstimator{};
  double jitter = 0.0;
};

double annealing_weight(double epoch, double start, double end);
double annealing_weight(double epoch, const Annealing& a);

class Adam {
 public:
  explicit Adam(const ad::ParamStore& params, double lr = 1e-3, double beta1 = 0.9,
                double beta2 = 0.999, double eps = 1e-8);
  // Throws NumericError, leaving parameters untouched, on a non-finite gradient.
  void step(const std::vector<Tensor>& grads);
  std::size_t steps() const { return t_; }
  double lr() const { return lr_; }

 private:
  std::vector<ad::Var> params_;
  std::vector<std::string> names_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  double lr_;
  double beta1_;
  double beta2_;
  double eps_;
  std::size_t t_ = 0;
};

struct LossParts {
  ad::Var loss;              // scalar to minimize
  double lambda = 0.0;
  double reconstruction = 0.0;  // batch mean of ||x - f f_dagger x||^2
  bool cg_converged = true;
  std::size_t cg_iterations = 0;
};

// Batch mean of -[lambda (log p(u) + log|det J_low^-1| - 0.5 logdet) - beta recon].
LossParts ml_loss(const rect::RectangularFlow& rf, const Tensor& batch,
                  const ObjectiveConfig& cfg, double epoch, est::ProbeDistribution& probes);

// Exact objective with full likelihood weight, as a batch mean (value only).
double full_objective(const rect::RectangularFlow& rf, const Tensor& data, double beta,
                      double jitter = 0.0);

struct TwoStepStats {
  double reconstruction = 0.0;
  double low_loss = 0.0;
  std::size_t likelihood_steps = 0;
  std::size_t reconstruction_steps = 0;
};

// One likelihood pass over the low flow (high flow frozen), then one
// reconstruction pass over the high flow (low flow untouched).
TwoStepStats two_step_epoch(rect::RectangularFlow& rf, const Tensor& train,
                            const ObjectiveConfig& cfg, double epoch, std::size_t batch_size,
                            Adam& low_opt, Adam& high_opt, std::mt19937_64& rng);

// Tracks the best value; stop() turns true after `patience` consecutive
// non-improving updates.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience) : patience_(patience) {}
  // Returns true if `value` is a new best.
  bool update(double value);
  bool stop() const { return bad_epochs_ >= patience_; }
  bool has_best() const { return has_best_; }
  double best() const { return best_; }

 private:
  std::size_t patience_;
  std::size_t bad_epochs_ = 0;
  bool has_best_ = false;
  double best_ = 0.0;
};

struct TrainConfig {
  ObjectiveConfig objective{};
  double lr = 1e-3;
  std::size_t batch_size = 1000;
  std::size_t patience = 50;
  std::size_t max_epochs = 5000;
  EarlyStop criterion = EarlyStop::FullObjective;
  std::uint64_t seed = 0;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double lambda = 0.0;
  double train_loss = 0.0;
  double train_reconstruction = 0.0;
  double val_criterion = 0.0;
  double val_reconstruction = 0.0;
  std::uint64_t jvp = 0;
  std::uint64_t vjp = 0;
  std::size_t cg_nonconverged = 0;
  std::size_t skipped_steps = 0;
  bool improved = false;
  double seconds = 0.0;
};

struct TrainReport {
  std::vector<EpochMetrics> epochs;
  std::size_t best_epoch = 0;
  double best_value = 0.0;
  bool early_stopped = false;
  bool aborted = false;
  std::string abort_reason;
  std::vector<Tensor> best_params;
};

// Trains until early stopping or max_epochs. Early stopping only counts
// epochs once the likelihood weight has reached 1. On return the model holds
// the best parameters seen.
TrainReport fit(rect::RectangularFlow& rf, const Tensor& train, const Tensor& val,
                const TrainConfig& cfg,
                const std::function<void(const EpochMetrics&)>& on_epoch = {});

}  // namespace rectflow::train
