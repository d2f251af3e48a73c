#include "rectflow/commands.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>

#include "json.hpp"
#include "rectflow/checkpoint.hpp"
#include "rectflow/errors.hpp"
#include "rectflow/metrics.hpp"

namespace rectflow::app {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kSessionStream = 0x5eed5eed5eedULL;

void ensure_dir(const std::string& dir) {
  if (dir.empty()) return;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw FileError("cannot create output directory '" + dir + "': " + ec.message());
}

void ensure_parent(const std::string& path) {
  ensure_dir(fs::path(path).parent_path().string());
}

void write_text(const std::string& path, const std::string& text) {
  ensure_parent(path);
  std::ofstream out(path);
  if (!out) throw FileError("cannot write '" + path + "'");
  out << text << '\n';
}

std::string join(const std::string& dir, const std::string& name) {
  return (fs::path(dir) / name).string();
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::nan("");
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

Tensor load_model_space(const Checkpoint& ck, const std::string& csv) {
  Tensor raw = data::load_csv(csv);
  Tensor x = ck.standardization ? data::apply_standardization(*ck.standardization, raw) : raw;
  if (x.cols() != ck.model.high_dim()) {
    throw InputError("'" + csv + "' has " + std::to_string(x.cols()) + " columns, model expects " +
                     std::to_string(ck.model.high_dim()));
  }
  return x;
}

json eval_summary(const metrics::Evaluation& ev) {
  return {{"rows", ev.reconstruction.size()},
          {"evaluated", ev.evaluated.size()},
          {"excluded", ev.excluded},
          {"mean_log_likelihood", finite_or_null(mean_of(ev.log_likelihood))},
          {"mean_reconstruction", finite_or_null(mean_of(ev.reconstruction))}};
}

void write_histogram_csv(const std::string& path, const metrics::Histogram& a,
                         const metrics::Histogram& b) {
  Tensor t({a.counts.size(), 4});
  for (std::size_t i = 0; i < a.counts.size(); ++i) {
    t(i, 0) = a.edges[i];
    t(i, 1) = a.edges[i + 1];
    t(i, 2) = static_cast<double>(a.counts[i]);
    t(i, 3) = static_cast<double>(b.counts[i]);
  }
  ensure_parent(path);
  data::write_csv(path, t, {"bin_lo", "bin_hi", "count_in", "count_out"});
}

// ---- gradcheck suites ----

struct SuiteResult {
  std::string name;
  double error = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

double rel(double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); }

Tensor random_normal(Tensor::Shape shape, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto& v : t.values()) v = n(rng);
  return t;
}

SuiteResult suite_adjoint(const rect::RectangularFlow& rf, std::mt19937_64& rng) {
  const auto& f = rf.embedding();
  double worst = 0.0;
  for (int k = 0; k < 10; ++k) {
    Tensor z = random_normal({f.input_dim()}, rng);
    Tensor eps = random_normal({f.input_dim()}, rng);
    Tensor v = random_normal({f.output_dim()}, rng);
    Tensor jeps = ad::jvp(f, z, eps).second;
    Tensor vj = ad::vjp(f, z, v);
    double lhs = 0.0;
    double rhs = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) lhs += v[i] * jeps[i];
    for (std::size_t i = 0; i < eps.size(); ++i) rhs += vj[i] * eps[i];
    worst = std::max(worst, std::abs(lhs - rhs) / (1.0 + std::abs(lhs)));
  }
  return {"jvp/vjp adjoint identity", worst, 1e-10, worst < 1e-10};
}

double max_fd_error(const ad::ParamStore& params, const std::vector<Tensor>& grads,
                    const std::function<double()>& value, double h) {
  double worst = 0.0;
  const auto& entries = params.entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    ad::Var p = entries[i].var;
    for (std::size_t k = 0; k < p.value().size(); ++k) {
      const double orig = p.value()[k];
      p.mutable_value()[k] = orig + h;
      const double up = value();
      p.mutable_value()[k] = orig - h;
      const double down = value();
      p.mutable_value()[k] = orig;
      worst = std::max(worst, rel(grads[i][k], (up - down) / (2.0 * h)));
    }
  }
  return worst;
}

SuiteResult suite_exact_logdet(const rect::RectangularFlow& rf, std::mt19937_64& rng) {
  const auto& f = rf.embedding();
  Tensor z = random_normal({f.input_dim()}, rng);
  auto grads = est::grad_logdet_exact(f, z, rf.high_params());
  const double err = max_fd_error(rf.high_params(), grads, [&] {
    return est::logdet_jtj_exact(est::build_jacobian(f, z));
  }, 1e-6);
  return {"exact log-det gradient vs finite differences", err, 1e-4, err < 1e-4};
}

SuiteResult suite_ml_loss(const rect::RectangularFlow& rf, std::mt19937_64& rng) {
  Tensor x = random_normal({8, rf.high_dim()}, rng);
  train::ObjectiveConfig cfg;
  cfg.beta = 5.0;
  cfg.anneal.enabled = false;
  est::ProbeDistribution probes;
  auto grads = ad::param_grad(train::ml_loss(rf, x, cfg, 0.0, probes).loss, rf.params());
  const double err = max_fd_error(rf.params(), grads, [&] {
    ad::NoGradGuard no_grad;
    return train::ml_loss(rf, x, cfg, 0.0, probes).loss.value().item();
  }, 1e-6);
  return {"ml loss gradient vs finite differences", err, 1e-4, err < 1e-4};
}

SuiteResult suite_unbiased(const rect::RectangularFlow& rf, std::mt19937_64& rng,
                           est::ProbeKind kind, std::size_t n) {
  const auto& f = rf.embedding();
  Tensor z = random_normal({1, f.input_dim()}, rng);
  auto exact = est::grad_logdet_exact(f, z, rf.high_params());
  est::StochasticEstimator cfg{1, 1e-12, kind};
  est::ProbeDistribution probes(kind, rng());
  std::vector<std::vector<double>> sum(exact.size());
  std::vector<std::vector<double>> sq(exact.size());
  for (std::size_t i = 0; i < exact.size(); ++i) {
    sum[i].assign(exact[i].size(), 0.0);
    sq[i].assign(exact[i].size(), 0.0);
  }
  for (std::size_t s = 0; s < n; ++s) {
    est::SurrogateResult r = est::logdet_surrogate_stochastic(f, ad::constant(z), cfg, probes);
    auto g = ad::param_grad(ad::sum_all(r.value), rf.high_params());
    for (std::size_t i = 0; i < g.size(); ++i) {
      for (std::size_t k = 0; k < g[i].size(); ++k) {
        sum[i][k] += g[i][k];
        sq[i][k] += g[i][k] * g[i][k];
      }
    }
  }
  std::size_t inside = 0;
  std::size_t total = 0;
  for (std::size_t i = 0; i < exact.size(); ++i) {
    for (std::size_t k = 0; k < exact[i].size(); ++k) {
      const double m = sum[i][k] / static_cast<double>(n);
      const double var = std::max(0.0, sq[i][k] / static_cast<double>(n) - m * m);
      const double se = std::sqrt(var / static_cast<double>(n));
      if (std::abs(m - exact[i][k]) <= 3.0 * se + 1e-12) ++inside;
      ++total;
    }
  }
  const double frac = total ? static_cast<double>(inside) / static_cast<double>(total) : 1.0;
  return {"stochastic gradient mean within 3 s.e. (" + est::to_string(kind) + ")", frac, 0.95,
          frac >= 0.95};
}

}  // namespace

int run_guarded(const std::function<int()>& body, std::ostream& err) {
  try {
    return body();
  } catch (const VersionError& e) {
    err << "error: " << e.what() << '\n';
    return kExitVersion;
  } catch (const FileError& e) {
    err << "error: " << e.what() << '\n';
    return kExitFile;
  } catch (const ConditioningError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const InputError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const UnsupportedError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }
}

int cmd_simulate(const SimulateOptions& opt, std::ostream& log) {
  if (opt.n == 0) throw InputError("n must be at least 1");
  if (!(opt.concentration > 0.0)) throw InputError("concentration must be positive");
  Tensor x = data::sample_von_mises_circle(opt.n, opt.loc, opt.concentration, opt.seed);
  ensure_parent(opt.out);
  data::write_csv(opt.out, x);
  log << "wrote " << opt.n << " points to " << opt.out << '\n';
  return kExitOk;
}

int cmd_train(const ExperimentConfig& cfg, const std::string& out_dir, std::ostream& log,
              bool verbose) {
  data::Dataset ds = make_dataset(cfg);
  for (const auto& w : ds.warnings) log << "warning: " << w << '\n';
  ensure_dir(out_dir);
  write_text(join(out_dir, "config.json"), to_json(cfg));

  rect::RectangularFlow rf = rect::RectangularFlow::build(cfg.rect_spec(), cfg.seed);
  const std::string metrics_path = join(out_dir, "metrics.csv");
  std::ofstream metrics_csv(metrics_path);
  if (!metrics_csv) throw FileError("cannot write '" + metrics_path + "'");
  metrics_csv << "epoch,lambda,train_loss,train_reconstruction,val_criterion,val_reconstruction,"
                 "jvp,vjp,cg_nonconverged,skipped_steps,improved,seconds\n";
  metrics_csv << std::setprecision(17);

  train::TrainReport report = train::fit(
      rf, ds.train_data(), ds.val_data(), cfg.train_config(), [&](const train::EpochMetrics& e) {
        metrics_csv << e.epoch << ',' << e.lambda << ',' << e.train_loss << ','
                    << e.train_reconstruction << ',' << e.val_criterion << ','
                    << e.val_reconstruction << ',' << e.jvp << ',' << e.vjp << ','
                    << e.cg_nonconverged << ',' << e.skipped_steps << ',' << (e.improved ? 1 : 0)
                    << ',' << e.seconds << '\n';
        metrics_csv.flush();
        if (verbose && (e.epoch % 50 == 0 || e.improved)) {
          log << "epoch " << e.epoch << " lambda " << e.lambda << " loss " << e.train_loss
              << " recon " << e.train_reconstruction << " val " << e.val_criterion << '\n';
        }
      });

  std::mt19937_64 session(cfg.seed ^ kSessionStream);
  const Tensor test = ds.test_data();
  metrics::Evaluation ev = metrics::eval_log_likelihoods(rf, test, cfg.jitter);
  json test_json = eval_summary(ev);
  if (test.rows() >= 2) {
    test_json["fid_like"] = metrics::fid_like(test, rect::rect_sample(rf, test.rows(), session));
  }
  save_checkpoint(join(out_dir, "model.ckpt"), cfg, rf, ds.standardization, session);

  json summary = {{"epochs", report.epochs.size()},
                  {"best_epoch", report.best_epoch},
                  {"best_value", finite_or_null(report.best_value)},
                  {"early_stopped", report.early_stopped},
                  {"aborted", report.aborted},
                  {"abort_reason", report.abort_reason},
                  {"test", test_json}};
  write_text(join(out_dir, "summary.json"), summary.dump(2));
  log << summary.dump(2) << '\n';
  if (report.aborted) {
    log << "training aborted: " << report.abort_reason << "; saved the last good state\n";
    return kExitNumeric;
  }
  return kExitOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& data_csv,
             const std::string& out_dir, std::ostream& log) {
  Checkpoint ck = load_checkpoint(checkpoint);
  Tensor x = data_csv.empty() ? make_dataset(ck.config).test_data() : load_model_space(ck, data_csv);
  metrics::Evaluation ev = metrics::eval_log_likelihoods(ck.model, x, ck.config.jitter);
  json out = eval_summary(ev);
  if (x.rows() >= 2) out["fid_like"] = metrics::fid_like(x, rect::rect_sample(ck.model, x.rows(), ck.rng));

  ensure_dir(out_dir);
  Tensor points({x.rows(), 3});
  for (std::size_t r = 0; r < x.rows(); ++r) {
    points(r, 0) = static_cast<double>(r);
    points(r, 1) = std::nan("");
    points(r, 2) = ev.reconstruction[r];
  }
  for (std::size_t i = 0; i < ev.evaluated.size(); ++i) points(ev.evaluated[i], 1) = ev.log_likelihood[i];
  data::write_csv(join(out_dir, "eval_points.csv"), points, {"row", "log_likelihood", "reconstruction"});
  write_text(join(out_dir, "eval.json"), out.dump(2));
  log << out.dump(2) << '\n';
  return kExitOk;
}

int cmd_sample(const std::string& checkpoint, std::size_t n, std::optional<std::uint64_t> seed,
               const std::string& out_csv, std::ostream& log) {
  if (n == 0) throw InputError("n must be at least 1");
  Checkpoint ck = load_checkpoint(checkpoint);
  if (seed) ck.rng.seed(*seed);
  Tensor x = rect::rect_sample(ck.model, n, ck.rng);
  if (ck.standardization) x = data::unstandardize(*ck.standardization, x);
  ensure_parent(out_csv);
  data::write_csv(out_csv, x);
  log << "wrote " << n << " samples to " << out_csv << '\n';
  return kExitOk;
}

int cmd_ood(const std::string& checkpoint, const std::string& in_csv, const std::string& out_csv,
            std::size_t bins, const std::string& out_dir, std::ostream& log) {
  if (bins == 0) throw InputError("bins must be at least 1");
  Checkpoint ck = load_checkpoint(checkpoint);
  metrics::Evaluation in = metrics::eval_log_likelihoods(ck.model, load_model_space(ck, in_csv), ck.config.jitter);
  metrics::Evaluation out = metrics::eval_log_likelihoods(ck.model, load_model_space(ck, out_csv), ck.config.jitter);
  if (in.log_likelihood.empty() || out.log_likelihood.empty()) {
    throw ConditioningError("no row could be scored in one of the datasets", 0.0);
  }
  metrics::StumpResult stump = metrics::stump_accuracy(in.log_likelihood, out.log_likelihood);

  ensure_dir(out_dir);
  auto [ll_in, ll_out] = metrics::joint_histograms(in.log_likelihood, out.log_likelihood, bins);
  write_histogram_csv(join(out_dir, "ood_loglik_histogram.csv"), ll_in, ll_out);
  auto [rc_in, rc_out] = metrics::joint_histograms(in.reconstruction, out.reconstruction, bins);
  write_histogram_csv(join(out_dir, "ood_recon_histogram.csv"), rc_in, rc_out);

  json report = {{"in", eval_summary(in)},
                 {"out", eval_summary(out)},
                 {"stump", {{"threshold", stump.threshold}, {"accuracy", stump.accuracy}}}};
  write_text(join(out_dir, "ood_report.json"), report.dump(2));
  log << report.dump(2) << '\n';
  return kExitOk;
}

int cmd_speed(const std::string& checkpoint, const SpeedOptions& opt, std::ostream& log) {
  if (opt.points < 2) throw InputError("the grid needs at least two points");
  Checkpoint ck = load_checkpoint(checkpoint);
  if (ck.model.low_dim() != 1) throw UnsupportedError("speed profiles need d = 1");
  const double lo = opt.lo;
  const double hi = opt.hi;
  if (!(hi > lo)) throw InputError("grid needs lo < hi");
  Tensor grid({opt.points, 1});
  for (std::size_t i = 0; i < opt.points; ++i) {
    grid[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(opt.points - 1);
  }
  Tensor speed = rect::speed_profile(ck.model, grid);
  Tensor table({speed.size(), 3});
  double mx = 0.0;
  double mn = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < speed.size(); ++i) {
    table(i, 0) = grid[i];
    table(i, 1) = grid[i + 1];
    table(i, 2) = speed[i];
    mx = std::max(mx, speed[i]);
    mn = std::min(mn, speed[i]);
  }
  ensure_parent(opt.out_csv);
  data::write_csv(opt.out_csv, table, {"z_from", "z_to", "distance"});
  log << "grid [" << lo << ", " << hi << "], max/min distance " << mx / mn << ", wrote "
      << opt.out_csv << '\n';
  return kExitOk;
}

int cmd_gradcheck(const std::optional<ExperimentConfig>& cfg, std::ostream& log,
                  std::size_t probes) {
  rect::RectSpec spec;
  std::uint64_t seed = 0;
  if (cfg) {
    spec = cfg->rect_spec();
    seed = cfg->seed;
  } else {
    spec.D = 4;
    spec.d = 2;
    spec.high = {2, {6}, true};
    spec.low.kind = rect::LowFlowSpec::Kind::Affine;
  }
  rect::RectangularFlow rf = rect::RectangularFlow::build(spec, seed);
  std::mt19937_64 rng(seed + 1);
  {
    std::normal_distribution<double> n(0.0, 0.3);
    for (const auto& e : rf.params().entries()) {
      ad::Var v = e.var;
      for (auto& x : v.mutable_value().values()) x += n(rng);
    }
  }

  std::vector<SuiteResult> results;
  results.push_back(suite_adjoint(rf, rng));
  results.push_back(suite_exact_logdet(rf, rng));
  results.push_back(suite_ml_loss(rf, rng));
  results.push_back(suite_unbiased(rf, rng, est::ProbeKind::Gaussian, probes));
  results.push_back(suite_unbiased(rf, rng, est::ProbeKind::Rademacher, probes));

  bool ok = true;
  log << std::left << std::setw(56) << "suite" << std::setw(14) << "value" << std::setw(12)
      << "tolerance" << "result\n";
  for (const auto& r : results) {
    log << std::left << std::setw(56) << r.name << std::setw(14) << std::setprecision(4)
        << r.error << std::setw(12) << r.tolerance << (r.pass ? "PASS" : "FAIL") << '\n';
    ok = ok && r.pass;
  }
  return ok ? kExitOk : kExitCheckFailed;
}

}  // namespace rectflow::app
