#pragma once

// Helpers shared by the unit tests. The finite-difference routines only touch
// plain values, never the tape, so they stay independent of the code under
// test.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "rectflow/autodiff.hpp"
#include "rectflow/maps.hpp"
#include "rectflow/tensor.hpp"

namespace testutil {

using rectflow::Tensor;

inline Tensor random_tensor(Tensor::Shape shape, std::mt19937_64& rng,
                            double stddev = 1.0) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

inline double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max(1.0, std::max(std::abs(a), std::abs(b)));
}

inline double max_rel_err(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, rel_err(a[i], b[i]));
  return m;
}

// Central difference of f along direction dir at x.
inline Tensor fd_directional(const std::function<Tensor(const Tensor&)>& f,
                             const Tensor& x, const Tensor& dir, double h = 1e-5) {
  Tensor xp = x;
  Tensor xm = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    xp[i] += h * dir[i];
    xm[i] -= h * dir[i];
  }
  Tensor fp = f(xp);
  Tensor fm = f(xm);
  Tensor out(fp.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (fp[i] - fm[i]) / (2.0 * h);
  return out;
}

// Central-difference gradient of a scalar function of a parameter leaf,
// perturbing the leaf's value in place.
inline Tensor fd_param_grad(rectflow::ad::Var param, const std::function<double()>& loss,
                            double h = 1e-5) {
  Tensor g(param.value().shape());
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double orig = param.value()[i];
    param.mutable_value()[i] = orig + h;
    const double lp = loss();
    param.mutable_value()[i] = orig - h;
    const double lm = loss();
    param.mutable_value()[i] = orig;
    g[i] = (lp - lm) / (2.0 * h);
  }
  return g;
}

// Adds seeded Gaussian noise to every parameter so nothing sits at the
// identity initialization.
inline void randomize(const rectflow::ad::ParamStore& params, std::uint64_t seed,
                      double stddev = 0.3) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, stddev);
  for (const auto& e : params.entries()) {
    rectflow::ad::Var v = e.var;
    for (auto& x : v.mutable_value().values()) x += dist(rng);
  }
}

// Dense [out, in] Jacobian of a map at a single point by central
// differences of plain evaluations.
inline Tensor fd_jacobian(const rectflow::ad::DifferentiableMap& f, const Tensor& z,
                          double h = 1e-5) {
  const std::size_t n = f.input_dim();
  const std::size_t m = f.output_dim();
  Tensor J({m, n});
  for (std::size_t c = 0; c < n; ++c) {
    Tensor e({n});
    e[c] = 1.0;
    Tensor col = fd_directional(
        [&](const Tensor& p) { return rectflow::ad::evaluate(f, p); }, z, e, h);
    for (std::size_t r = 0; r < m; ++r) J(r, c) = col[r];
  }
  return J;
}

}  // namespace testutil
