#include "rectflow/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>

#include "rectflow/data.hpp"
#include "rectflow/errors.hpp"
#include "rectflow/metrics.hpp"

namespace rectflow::train {

namespace {

constexpr std::size_t kMaxConsecutiveFailures = 5;

std::vector<std::vector<std::size_t>> minibatches(std::size_t n, std::size_t batch_size,
                                                  std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t s = 0; s < n; s += batch_size) {
    out.emplace_back(idx.begin() + s, idx.begin() + std::min(n, s + batch_size));
  }
  return out;
}

double mean_value(const ad::Var& col) {
  double s = 0.0;
  for (double v : col.value().values()) s += v;
  return s / static_cast<double>(col.value().size());
}

}  // namespace

Method parse_method(const std::string& name) {
  if (name == "ml") return Method::ML;
  if (name == "two_step") return Method::TwoStep;
  throw InputError("unknown method '" + name + "' (expected ml or two_step)");
}

std::string to_string(Method m) { return m == Method::ML ? "ml" : "two_step"; }

EarlyStop parse_early_stop(const std::string& name) {
  if (name == "full_objective") return EarlyStop::FullObjective;
  if (name == "fid_like") return EarlyStop::FidLike;
  throw InputError("unknown early-stopping criterion '" + name + "'");
}

std::string to_string(EarlyStop e) {
  return e == EarlyStop::FullObjective ? "full_objective" : "fid_like";
}

double annealing_weight(double epoch, double start, double end) {
  if (start > end) throw InputError("annealing start must not exceed its end");
  if (epoch < start) return 0.0;
  if (epoch >= end) return 1.0;
  return (epoch - start) / (end - start);
}

double annealing_weight(double epoch, const Annealing& a) {
  return a.enabled ? annealing_weight(epoch, a.start, a.end) : 1.0;
}

Adam::Adam(const ad::ParamStore& params, double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& e : params.entries()) {
    params_.push_back(e.var);
    names_.push_back(e.name);
    m_.emplace_back(e.var.value().shape());
    v_.emplace_back(e.var.value().shape());
  }
}

void Adam::step(const std::vector<Tensor>& grads) {
  if (grads.size() != params_.size()) throw InputError("gradient count differs from parameter count");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].size() != params_[i].value().size()) {
      throw InputError("gradient shape differs from its parameter");
    }
    if (!grads[i].all_finite()) {
      throw NumericError("non-finite gradient for parameter " + names_[i]);
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i].mutable_value();
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    const Tensor& g = grads[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = beta1_ * m[k] + (1.0 - beta1_) * g[k];
      v[k] = beta2_ * v[k] + (1.0 - beta2_) * g[k] * g[k];
      p[k] -= lr_ * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_);
    }
  }
}

LossParts ml_loss(const rect::RectangularFlow& rf, const Tensor& batch,
                  const ObjectiveConfig& cfg, double epoch, est::ProbeDistribution& probes) {
  if (cfg.method != Method::ML) throw InputError("ml_loss needs the ML method");
  LossParts out;
  out.lambda = annealing_weight(epoch, cfg.anneal);
  ad::GradModeGuard record(true);
  ad::Var x = ad::constant(batch);
  ad::Var z = rf.f_dagger(x);

  if (out.lambda == 0.0) {
    ad::Var recon = ad::sum_cols(ad::square(ad::sub(x, rf.f(z))));
    out.reconstruction = mean_value(recon);
    out.loss = ad::scale(ad::mean_all(recon), cfg.beta);
    return out;
  }

  ad::Var image;
  ad::Var logdet;
  if (const auto* st = std::get_if<est::StochasticEstimator>(&cfg.estimator)) {
    est::SurrogateResult s = est::logdet_surrogate_stochastic(rf.embedding(), z, *st, probes);
    out.cg_converged = s.converged;
    out.cg_iterations = s.max_cg_iterations;
    logdet = s.value;
    image = rf.f(z);
  } else {
    logdet = est::logdet_jtj_var(rf.embedding(), z, cfg.jitter, &image);
  }
  auto [u, low_ld] = rf.low().inverse(z);
  ad::Var lik = ad::sub(ad::add(rf.base().log_prob(u), low_ld), ad::scale(logdet, 0.5));
  ad::Var recon = ad::sum_cols(ad::square(ad::sub(x, image)));
  out.reconstruction = mean_value(recon);
  ad::Var per_point = ad::sub(ad::scale(lik, out.lambda), ad::scale(recon, cfg.beta));
  out.loss = ad::neg(ad::mean_all(per_point));
  return out;
}

double full_objective(const rect::RectangularFlow& rf, const Tensor& data, double beta,
                      double jitter) {
  ad::NoGradGuard no_grad;
  ad::Var x = ad::constant(data);
  rect::DensityTerms t = rect::density_terms(rf, x, jitter);
  ad::Var recon = rf.reconstruction_error(x);
  return -(mean_value(t.log_density) - beta * mean_value(recon));
}

TwoStepStats two_step_epoch(rect::RectangularFlow& rf, const Tensor& train,
                            const ObjectiveConfig& cfg, double epoch, std::size_t batch_size,
                            Adam& low_opt, Adam& high_opt, std::mt19937_64& rng) {
  if (cfg.method != Method::TwoStep) throw InputError("two_step_epoch needs the two-step method");
  if (batch_size == 0) throw InputError("batch size must be positive");
  TwoStepStats stats;
  const double lambda = annealing_weight(epoch, cfg.anneal);

  if (lambda > 0.0 && rf.low_params().size() > 0) {
    for (const auto& idx : minibatches(train.rows(), batch_size, rng)) {
      ad::Var z;
      {
        ad::NoGradGuard no_grad;
        z = ad::constant(rf.f_dagger(ad::constant(data::gather_rows(train, idx))).value());
      }
      ad::GradModeGuard record(true);
      auto [u, low_ld] = rf.low().inverse(z);
      ad::Var loss =
          ad::scale(ad::mean_all(ad::add(rf.base().log_prob(u), low_ld)), -lambda);
      low_opt.step(ad::param_grad(loss, rf.low_params()));
      stats.low_loss += loss.value().item();
      ++stats.likelihood_steps;
    }
    stats.low_loss /= static_cast<double>(stats.likelihood_steps);
  }

  for (const auto& idx : minibatches(train.rows(), batch_size, rng)) {
    ad::GradModeGuard record(true);
    ad::Var recon = rf.reconstruction_error(ad::constant(data::gather_rows(train, idx)));
    ad::Var loss = ad::scale(ad::mean_all(recon), cfg.beta);
    high_opt.step(ad::param_grad(loss, rf.high_params()));
    stats.reconstruction += mean_value(recon);
    ++stats.reconstruction_steps;
  }
  if (stats.reconstruction_steps) stats.reconstruction /= static_cast<double>(stats.reconstruction_steps);
  return stats;
}

bool EarlyStopping::update(double value) {
  if (std::isfinite(value) && (!has_best_ || value < best_)) {
    best_ = value;
    has_best_ = true;
    bad_epochs_ = 0;
    return true;
  }
  ++bad_epochs_;
  return false;
}

TrainReport fit(rect::RectangularFlow& rf, const Tensor& train, const Tensor& val,
                const TrainConfig& cfg, const std::function<void(const EpochMetrics&)>& on_epoch) {
  if (train.rows() == 0 || val.rows() < 2) throw InputError("training needs data and at least two validation rows");
  if (cfg.batch_size == 0) throw InputError("batch size must be positive");
  if (!(cfg.objective.beta > 0.0)) throw InputError("beta must be positive");

  std::mt19937_64 rng(cfg.seed);
  est::ProbeDistribution probes(
      std::holds_alternative<est::StochasticEstimator>(cfg.objective.estimator)
          ? std::get<est::StochasticEstimator>(cfg.objective.estimator).probe
          : est::ProbeKind::Gaussian,
      cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::mt19937_64 sample_rng(cfg.seed + 1);

  const bool two_step = cfg.objective.method == Method::TwoStep;
  Adam all_opt(rf.params(), cfg.lr);
  Adam low_opt(rf.low_params(), cfg.lr);
  Adam high_opt(rf.high_params(), cfg.lr);

  TrainReport report;
  EarlyStopping stopper(cfg.patience);
  std::vector<Tensor> last_good = rf.params().snapshot();
  report.best_params = last_good;

  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    ad::cost_counters().reset();
    EpochMetrics em;
    em.epoch = epoch;
    em.lambda = annealing_weight(static_cast<double>(epoch), cfg.objective.anneal);

    try {
      if (two_step) {
        TwoStepStats s = two_step_epoch(rf, train, cfg.objective, static_cast<double>(epoch),
                                        cfg.batch_size, low_opt, high_opt, rng);
        em.train_reconstruction = s.reconstruction;
        em.train_loss = cfg.objective.beta * s.reconstruction + s.low_loss;
      } else {
        std::size_t failures = 0;
        std::size_t steps = 0;
        for (const auto& idx : minibatches(train.rows(), cfg.batch_size, rng)) {
          try {
            LossParts lp = ml_loss(rf, data::gather_rows(train, idx), cfg.objective,
                                   static_cast<double>(epoch), probes);
            all_opt.step(ad::param_grad(lp.loss, rf.params()));
            em.train_loss += lp.loss.value().item();
            em.train_reconstruction += lp.reconstruction;
            if (!lp.cg_converged) ++em.cg_nonconverged;
            ++steps;
            failures = 0;
          } catch (const ConditioningError&) {
            if (++failures >= kMaxConsecutiveFailures) throw;
            ++em.skipped_steps;
          } catch (const NumericError&) {
            if (++failures >= kMaxConsecutiveFailures) throw;
            ++em.skipped_steps;
          }
        }
        if (steps) {
          em.train_loss /= static_cast<double>(steps);
          em.train_reconstruction /= static_cast<double>(steps);
        }
      }
    } catch (const Error& e) {
      rf.params().restore(last_good);
      report.aborted = true;
      report.abort_reason = "epoch " + std::to_string(epoch) + ": " + e.what();
      break;
    }
    std::vector<Tensor> current = rf.params().snapshot();
    if (!std::all_of(current.begin(), current.end(), [](const Tensor& t) { return t.all_finite(); })) {
      rf.params().restore(last_good);
      report.aborted = true;
      report.abort_reason = "epoch " + std::to_string(epoch) + ": non-finite parameters";
      break;
    }
    last_good = std::move(current);

    const Tensor val_recon = rect::reconstruction_error(rf, val);
    for (double v : val_recon.values()) em.val_reconstruction += v / static_cast<double>(val_recon.size());
    try {
      if (cfg.criterion == EarlyStop::FullObjective) {
        em.val_criterion = full_objective(rf, val, cfg.objective.beta, cfg.objective.jitter);
      } else {
        em.val_criterion = metrics::fid_like(val, rect::rect_sample(rf, val.rows(), sample_rng));
      }
    } catch (const Error&) {
      em.val_criterion = std::numeric_limits<double>::infinity();
    }

    const ad::CostSnapshot cost = ad::cost_counters().snapshot();
    em.jvp = cost.jvp;
    em.vjp = cost.vjp;
    const bool armed = em.lambda >= 1.0;
    if (armed) {
      em.improved = stopper.update(em.val_criterion);
      if (em.improved) {
        report.best_epoch = epoch;
        report.best_value = em.val_criterion;
        report.best_params = last_good;
      }
    } else {
      report.best_epoch = epoch;
      report.best_value = em.val_criterion;
      report.best_params = last_good;
    }
    em.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report.epochs.push_back(em);
    if (on_epoch) on_epoch(em);
    if (armed && stopper.stop()) {
      report.early_stopped = true;
      break;
    }
  }
  rf.params().restore(report.best_params);
  return report;
}

}  // namespace rectflow::train
