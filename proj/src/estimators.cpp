#include "rectflow/estimators.hpp"

#include <algorithm>
#include <cmath>

#include "rectflow/errors.hpp"

namespace rectflow::est {

namespace {

Tensor as_rows(const Tensor& t, std::size_t dim, const char* what) {
  if (t.rank() == 1 && t.size() == dim) return t.reshaped({1, dim});
  if (t.rank() == 2 && t.cols() == dim) return t;
  throw InputError(std::string(what) + " shape " + shape_string(t.shape()) +
                   " does not match dimension " + std::to_string(dim));
}

double row_dot(const Tensor& a, const Tensor& b, std::size_t r) {
  double s = 0.0;
  for (std::size_t c = 0; c < a.cols(); ++c) s += a(r, c) * b(r, c);
  return s;
}

Tensor unit_columns(std::size_t rows, std::size_t dim, std::size_t i) {
  Tensor e({rows, dim});
  for (std::size_t r = 0; r < rows; ++r) e(r, i) = 1.0;
  return e;
}

}  // namespace

ProbeKind parse_probe_kind(const std::string& name) {
  if (name == "gaussian") return ProbeKind::Gaussian;
  if (name == "rademacher") return ProbeKind::Rademacher;
  throw InputError("unknown probe distribution '" + name + "'");
}

std::string to_string(ProbeKind kind) {
  return kind == ProbeKind::Gaussian ? "gaussian" : "rademacher";
}

Tensor ProbeDistribution::draw(std::size_t rows, std::size_t dim) {
  Tensor t({rows, dim});
  if (kind_ == ProbeKind::Gaussian) {
    std::normal_distribution<double> n(0.0, 1.0);
    for (auto& v : t.values()) v = n(rng_);
  } else {
    std::bernoulli_distribution b(0.5);
    for (auto& v : t.values()) v = b(rng_) ? 1.0 : -1.0;
  }
  return t;
}

std::size_t CgResult::max_iterations() const {
  return iterations.empty() ? 0 : *std::max_element(iterations.begin(), iterations.end());
}

CgResult cg_solve(const MvpFn& mvp, const Tensor& eps, double tol) {
  if (tol < 0.0) throw InputError("CG tolerance must be nonnegative");
  if (eps.rank() == 0 || eps.rank() > 2) throw InputError("CG right-hand side must be a vector or batch");
  const bool single = eps.rank() == 1;
  const Tensor b = single ? eps.reshaped({1, eps.size()}) : eps;
  const std::size_t rows = b.rows();
  const std::size_t d = b.cols();

  Tensor x({rows, d});
  Tensor r = b;
  Tensor p = b;
  std::vector<double> rs(rows);
  std::vector<double> target(rows);
  std::vector<std::size_t> tau(rows, 0);
  for (std::size_t i = 0; i < rows; ++i) {
    rs[i] = row_dot(r, r, i);
    target[i] = tol * std::sqrt(row_dot(b, b, i));
  }
  auto active = [&](std::size_t i) { return std::sqrt(rs[i]) > target[i] && tau[i] < d; };

  for (;;) {
    bool any = false;
    for (std::size_t i = 0; i < rows && !any; ++i) any = active(i);
    if (!any) break;
    const Tensor q = mvp(p);
    for (std::size_t i = 0; i < rows; ++i) {
      if (!active(i)) continue;
      const double pq = row_dot(p, q, i);
      if (!(pq > 0.0)) {
        if (std::isnan(pq)) {
          throw NumericError("CG produced NaN at iteration " + std::to_string(tau[i]));
        }
        throw ConditioningError("CG operator is not positive definite (p^T A p = " +
                                    std::to_string(pq) + ")",
                                pq);
      }
      const double alpha = rs[i] / pq;
      for (std::size_t c = 0; c < d; ++c) {
        x(i, c) += alpha * p(i, c);
        r(i, c) -= alpha * q(i, c);
      }
      const double rs_new = row_dot(r, r, i);
      if (std::isnan(rs_new)) {
        throw NumericError("CG produced NaN at iteration " + std::to_string(tau[i] + 1));
      }
      const double beta = rs_new / rs[i];
      for (std::size_t c = 0; c < d; ++c) p(i, c) = r(i, c) + beta * p(i, c);
      rs[i] = rs_new;
      ++tau[i];
    }
  }

  CgResult out;
  out.solution = single ? x.reshaped({d}) : x;
  out.iterations = tau;
  out.residual_norm.resize(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    out.residual_norm[i] = std::sqrt(rs[i]);
    if (out.residual_norm[i] > target[i]) out.converged = false;
  }
  return out;
}

JtjOperator::JtjOperator(const DifferentiableMap& f, const Tensor& z) : f_(&f) {
  z_ = Var(as_rows(z, f.input_dim(), "JtJ point"), true);
  ad::GradModeGuard record(true);
  out_ = f.apply(z_);
}

Tensor JtjOperator::apply(const Tensor& eps) const {
  Tensor e = as_rows(eps, f_->input_dim(), "JtJ vector");
  if (e.rows() != z_.rows()) throw InputError("JtJ vector batch differs from the point batch");
  Var v;
  {
    ad::NoGradGuard no_grad;
    v = ad::jvp_var(*f_, ad::constant(z_.value()), ad::constant(e)).tangent;
  }
  Var w = ad::vjp_recorded(out_, z_, ad::constant(v.value()), false);
  return eps.rank() == 1 ? w.value().reshaped({eps.size()}) : w.value();
}

MvpFn JtjOperator::as_fn() const {
  return [this](const Tensor& eps) { return apply(eps); };
}

Tensor mvp_jtj(const DifferentiableMap& f, const Tensor& z, const Tensor& eps) {
  return JtjOperator(f, z).apply(eps);
}

std::vector<Var> jacobian_columns(const DifferentiableMap& f, const Var& z, Var* image) {
  const std::size_t d = f.input_dim();
  if (z.cols() != d) throw InputError("Jacobian point has the wrong dimension");
  std::vector<Var> cols;
  cols.reserve(d);
  for (std::size_t i = 0; i < d; ++i) {
    ad::Dual out = ad::jvp_var(f, z, ad::constant(unit_columns(z.rows(), d, i)));
    if (i == 0 && image) *image = out.primal;
    cols.push_back(out.tangent);
  }
  return cols;
}

Var gram(const std::vector<Var>& columns) {
  const std::size_t d = columns.size();
  std::vector<Var> entries(d * d);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = i; j < d; ++j) {
      entries[i * d + j] = ad::sum_cols(ad::mul(columns[i], columns[j]));
      entries[j * d + i] = entries[i * d + j];
    }
  }
  return ad::concat_cols(entries);
}

Tensor build_jacobian(const DifferentiableMap& f, const Tensor& z) {
  ad::NoGradGuard no_grad;
  Tensor point = as_rows(z, f.input_dim(), "Jacobian point");
  if (point.rows() != 1) throw InputError("build_jacobian takes a single point");
  std::vector<Var> cols = jacobian_columns(f, ad::constant(point));
  const std::size_t D = f.output_dim();
  const std::size_t d = cols.size();
  Tensor J({D, d});
  for (std::size_t c = 0; c < d; ++c) {
    for (std::size_t r = 0; r < D; ++r) J(r, c) = cols[c].value()[r];
  }
  return J;
}

double logdet_jtj_exact(const Tensor& jacobian, double jitter) {
  if (jacobian.rank() != 2) throw InputError("Jacobian must be a matrix");
  const std::size_t D = jacobian.rows();
  const std::size_t d = jacobian.cols();
  Tensor g({1, d * d});
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      double s = 0.0;
      for (std::size_t r = 0; r < D; ++r) s += jacobian(r, i) * jacobian(r, j);
      g[i * d + j] = s;
    }
  }
  ad::NoGradGuard no_grad;
  return ad::logdet_spd(ad::constant(g), d, jitter).value().item();
}

Var logdet_jtj_var(const DifferentiableMap& f, const Var& z, double jitter, Var* image) {
  return ad::logdet_spd(gram(jacobian_columns(f, z, image)), f.input_dim(), jitter);
}

std::vector<Tensor> grad_logdet_exact(const DifferentiableMap& f, const Tensor& z,
                                      const ad::ParamStore& params, double jitter) {
  ad::GradModeGuard record(true);
  Var point = ad::constant(as_rows(z, f.input_dim(), "Jacobian point"));
  return ad::param_grad(ad::sum_all(logdet_jtj_var(f, point, jitter)), params);
}

SurrogateResult logdet_surrogate_stochastic(const DifferentiableMap& f, const Var& z,
                                            const StochasticEstimator& cfg,
                                            ProbeDistribution& probes) {
  if (cfg.probes == 0) throw InputError("stochastic estimator needs at least one probe");
  if (cfg.cg_tol < 0.0) throw InputError("CG tolerance must be nonnegative");
  const std::size_t d = f.input_dim();
  if (z.cols() != d) throw InputError("surrogate point has the wrong dimension");

  ad::GradModeGuard record(true);
  // The vjp needs a tape rooted at the point even when nothing upstream tracks it.
  Var point = z.requires_grad() ? z : Var(z.value(), true);
  JtjOperator op(f, z.value());

  SurrogateResult result;
  Var total;
  for (std::size_t k = 0; k < cfg.probes; ++k) {
    Tensor eps = probes.draw(z.rows(), d);
    CgResult cg = cg_solve(op.as_fn(), eps, cfg.cg_tol);
    result.converged = result.converged && cg.converged;
    result.max_cg_iterations = std::max(result.max_cg_iterations, cg.max_iterations());
    result.total_cg_iterations += cg.max_iterations();

    ad::Dual image = ad::jvp_var(f, point, ad::constant(eps));
    Var jtj_eps = ad::vjp_recorded(image.primal, point, image.tangent, true);
    Var term = ad::sum_cols(ad::mul(ad::constant(cg.solution), jtj_eps));
    total = total.defined() ? ad::add(total, term) : term;
  }
  result.value = ad::scale(total, 1.0 / static_cast<double>(cfg.probes));
  return result;
}

}  // namespace rectflow::est
