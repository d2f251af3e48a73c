#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "rectflow/autodiff.hpp"
#include "rectflow/maps.hpp"

namespace rectflow::est {

using ad::DifferentiableMap;
using ad::Var;

enum class ProbeKind { Gaussian, Rademacher };

ProbeKind parse_probe_kind(const std::string& name);
std::string to_string(ProbeKind kind);

// Zero-mean, identity-covariance probe vectors from a private stream.
class ProbeDistribution {
 public:
  explicit ProbeDistribution(ProbeKind kind = ProbeKind::Gaussian, std::uint64_t seed = 0)
      : kind_(kind), rng_(seed) {}
  ProbeKind kind() const { return kind_; }
  Tensor draw(std::size_t rows, std::size_t dim);
  std::mt19937_64& rng() { return rng_; }

 private:
  ProbeKind kind_;
  std::mt19937_64 rng_;
};

struct ExactEstimator {};

struct StochasticEstimator {
  std::size_t probes = 1;  // K
  double cg_tol = 1e-3;    // relative to the probe norm
  ProbeKind probe = ProbeKind::Gaussian;
};

using GradEstimator = std::variant<ExactEstimator, StochasticEstimator>;

// Row-batched linear operator on [batch, d].
using MvpFn = std::function<Tensor(const Tensor&)>;

struct CgResult {
  Tensor solution;                      // same shape as the right-hand side
  std::vector<std::size_t> iterations;  // per row
  std::vector<double> residual_norm;    // per row
  bool converged = true;
  std::size_t max_iterations() const;
};

// Conjugate gradients for A x = eps, independently per row. Stops a row once
// ||r|| <= tol * ||eps|| or after d iterations; the latter without meeting
// the tolerance only clears `converged`. Accepts a single vector or a batch.
CgResult cg_solve(const MvpFn& mvp, const Tensor& eps, double tol);

// J^T J restricted to a fixed point z, applied as one jvp then one vjp. The
// forward pass of f at z is recorded once and reused by every product.
class JtjOperator {
 public:
  JtjOperator(const DifferentiableMap& f, const Tensor& z);
  Tensor apply(const Tensor& eps) const;
  MvpFn as_fn() const;

 private:
  const DifferentiableMap* f_;
  Var z_;
  Var out_;
};

Tensor mvp_jtj(const DifferentiableMap& f, const Tensor& z, const Tensor& eps);

// Jacobian columns J e_i as [batch, D] Vars, one jvp each. Differentiable in
// the parameters and in z when gradient recording is on. `image`, if given,
// receives f(z) from the first product.
std::vector<Var> jacobian_columns(const DifferentiableMap& f, const Var& z,
                                  Var* image = nullptr);
// Entries <c_i, c_j> as [batch, d*d].
Var gram(const std::vector<Var>& columns);

// Dense [D, d] Jacobian at a single point.
Tensor build_jacobian(const DifferentiableMap& f, const Tensor& z);

double logdet_jtj_exact(const Tensor& jacobian, double jitter = 0.0);

// log det J^T J of f at every row of z, [batch, 1].
Var logdet_jtj_var(const DifferentiableMap& f, const Var& z, double jitter = 0.0,
                   Var* image = nullptr);

// Gradient of log det J^T J at a single point with respect to `params`.
std::vector<Tensor> grad_logdet_exact(const DifferentiableMap& f, const Tensor& z,
                                      const ad::ParamStore& params, double jitter = 0.0);

struct SurrogateResult {
  Var value;  // [batch, 1]; only its gradient is meaningful
  bool converged = true;
  std::size_t max_cg_iterations = 0;
  std::size_t total_cg_iterations = 0;  // summed over probes, max over rows
};

// (1/K) sum_k stop(CG(J^T J; eps_k))^T J^T J eps_k per row. Its gradient
// estimates the gradient of log det J^T J.
SurrogateResult logdet_surrogate_stochastic(const DifferentiableMap& f, const Var& z,
                                            const StochasticEstimator& cfg,
                                            ProbeDistribution& probes);

}  // namespace rectflow::est
