#include <Eigen/Dense>
#include <cmath>
#include <random>

#include "doctest.h"
#include "rectflow/errors.hpp"
#include "rectflow/estimators.hpp"
#include "rectflow/rectangular.hpp"
#include "test_util.hpp"

using namespace rectflow;
using namespace rectflow::est;
using rect::PadSpec;
using rect::RectangularFlow;
using flows::SquareFlow;
using testutil::random_tensor;
using testutil::randomize;

namespace {

Eigen::MatrixXd to_eigen(const Tensor& t) {
  Eigen::MatrixXd m(t.rows(), t.cols());
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) m(r, c) = t(r, c);
  return m;
}

Tensor from_eigen_vec(const Eigen::VectorXd& v) {
  Tensor t({static_cast<std::size_t>(v.size())});
  for (Eigen::Index i = 0; i < v.size(); ++i) t[i] = v(i);
  return t;
}

MvpFn dense_mvp(const Eigen::MatrixXd& A) {
  return [A](const Tensor& x) {
    Tensor b = x.rank() == 1 ? x.reshaped({1, x.size()}) : x;
    Tensor out(b.shape());
    for (std::size_t r = 0; r < b.rows(); ++r) {
      Eigen::VectorXd v(b.cols());
      for (std::size_t c = 0; c < b.cols(); ++c) v(c) = b(r, c);
      Eigen::VectorXd w = A * v;
      for (std::size_t c = 0; c < b.cols(); ++c) out(r, c) = w(c);
    }
    return x.rank() == 1 ? out.reshaped({x.size()}) : out;
  };
}

// B^T B + I with B entries of variance 1/n, so the spectrum stays O(1) as n
// grows.
Eigen::MatrixXd random_spd(std::size_t n, std::mt19937_64& rng) {
  Eigen::MatrixXd B = to_eigen(random_tensor({n, n}, rng, 1.0 / std::sqrt(double(n))));
  return B.transpose() * B + Eigen::MatrixXd::Identity(n, n);
}

RectangularFlow tiny_model(std::uint64_t seed, bool random = true) {
  rect::RectSpec spec;
  spec.D = 4;
  spec.d = 2;
  spec.high = {2, {6}, true};
  spec.low.kind = rect::LowFlowSpec::Kind::Affine;
  RectangularFlow rf = RectangularFlow::build(spec, seed);
  if (random) randomize(rf.params(), seed + 1, 0.3);
  return rf;
}

RectangularFlow scaling_model(std::size_t d, std::size_t D, double log_s) {
  RectangularFlow rf(SquareFlow::elementwise_affine(D, "high."), PadSpec::seeded(d, D, 5),
                     SquareFlow(d, "low."));
  ad::Var c = *rf.params().find("high.layer0.log_scale");
  for (auto& v : c.mutable_value().values()) v = log_s;
  return rf;
}

Tensor dense_jtj_times(const Tensor& J, const Tensor& eps) {
  Eigen::MatrixXd j = to_eigen(J);
  Eigen::VectorXd e(eps.size());
  for (std::size_t i = 0; i < eps.size(); ++i) e(i) = eps[i];
  return from_eigen_vec(j.transpose() * (j * e));
}

}  // namespace

TEST_CASE("cg_solve on the identity converges in one iteration") {
  Tensor eps = Tensor::vector({1.0, -2.0, 0.5});
  CgResult r = cg_solve(dense_mvp(Eigen::MatrixXd::Identity(3, 3)), eps, 1e-12);
  CHECK(r.iterations[0] == 1);
  CHECK(r.converged);
  CHECK(max_abs_diff(r.solution, eps) < 1e-15);
}

TEST_CASE("cg_solve on a diagonal operator") {
  Eigen::VectorXd a(4);
  a << 1.0, 2.0, 5.0, 0.25;
  Tensor eps = Tensor::vector({1.0, 1.0, -3.0, 2.0});
  CgResult r = cg_solve(dense_mvp(a.asDiagonal()), eps, 1e-14);
  for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(r.solution[i] - eps[i] / a(i)) < 1e-10);
  CHECK(r.iterations[0] <= 4);
}

TEST_CASE("cg_solve matches a dense solve on random SPD systems") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    Eigen::MatrixXd A = random_spd(16, rng);
    Tensor eps = random_tensor({16}, rng);
    Eigen::VectorXd e(16);
    for (int i = 0; i < 16; ++i) e(i) = eps[i];
    Tensor expect = from_eigen_vec(A.llt().solve(e));
    CgResult r = cg_solve(dense_mvp(A), eps, 1e-13);
    CHECK(r.iterations[0] <= 16);
    CHECK(max_abs_diff(r.solution, expect) < 1e-8);
  }
}

TEST_CASE("batched cg_solve equals row-by-row solves") {
  std::mt19937_64 rng(4);
  Eigen::MatrixXd A = random_spd(6, rng);
  Tensor eps = random_tensor({5, 6}, rng);
  eps(2, 0) *= 1e3;  // rows converge at different iterations
  CgResult batch = cg_solve(dense_mvp(A), eps, 1e-6);
  for (std::size_t r = 0; r < 5; ++r) {
    CgResult one = cg_solve(dense_mvp(A), eps.row(r), 1e-6);
    CHECK(one.iterations[0] == batch.iterations[r]);
    for (std::size_t c = 0; c < 6; ++c) CHECK(one.solution[c] == batch.solution(r, c));
  }
}

TEST_CASE("cg_solve errors") {
  Eigen::MatrixXd A = Eigen::MatrixXd::Identity(2, 2);
  A(1, 1) = -1.0;
  CHECK_THROWS_AS(cg_solve(dense_mvp(A), Tensor::vector({0.0, 1.0}), 1e-10), ConditioningError);
  MvpFn nan_op = [](const Tensor& x) {
    Tensor y = x;
    y[0] = std::nan("");
    return y;
  };
  CHECK_THROWS_AS(cg_solve(nan_op, Tensor::vector({1.0, 1.0}), 1e-10), NumericError);
  CHECK_THROWS_AS(cg_solve(dense_mvp(A), Tensor::vector({1.0, 1.0}), -1.0), InputError);
}

TEST_CASE("cg_solve flags non-convergence without failing") {
  // Badly conditioned: d iterations in floating point may not reach 1e-16.
  Eigen::VectorXd a(3);
  a << 1.0, 1e-9, 1e9;
  CgResult r = cg_solve(dense_mvp(a.asDiagonal()), Tensor::vector({1.0, 1.0, 1.0}), 0.0);
  CHECK(r.iterations[0] == 3);
  CHECK(r.converged == (r.residual_norm[0] == 0.0));
}

TEST_CASE("Hutchinson trace estimate for both probe distributions") {
  std::mt19937_64 rng(8);
  Eigen::MatrixXd M = random_spd(8, rng);
  const double trace = M.trace();
  for (ProbeKind kind : {ProbeKind::Gaussian, ProbeKind::Rademacher}) {
    ProbeDistribution probes(kind, 11);
    Tensor eps = probes.draw(50000, 8);
    double acc = 0.0;
    for (std::size_t k = 0; k < eps.rows(); ++k) {
      Eigen::VectorXd e(8);
      for (int i = 0; i < 8; ++i) e(i) = eps(k, i);
      acc += e.dot(M * e);
    }
    CHECK(std::abs(acc / eps.rows() - trace) / trace < 1e-2);
  }
}

TEST_CASE("Rademacher probes are signs") {
  ProbeDistribution probes(ProbeKind::Rademacher, 2);
  const Tensor draws = probes.draw(10, 7);
  for (double v : draws.values()) CHECK(std::abs(v) == 1.0);
  CHECK(parse_probe_kind("gaussian") == ProbeKind::Gaussian);
  CHECK_THROWS_AS(parse_probe_kind("uniform"), InputError);
}

TEST_CASE("mvp_jtj closed forms") {
  std::mt19937_64 rng(5);
  Tensor z = random_tensor({2}, rng);
  Tensor eps = random_tensor({2}, rng);
  RectangularFlow ident = tiny_model(1, false);
  CHECK(max_abs_diff(mvp_jtj(ident.embedding(), z, eps), eps) < 1e-14);

  const double s = 1.6;
  RectangularFlow scaled = scaling_model(2, 4, std::log(s));
  Tensor out = mvp_jtj(scaled.embedding(), z, eps);
  for (std::size_t i = 0; i < 2; ++i) CHECK(out[i] == doctest::Approx(s * s * eps[i]).epsilon(1e-13));
}

TEST_CASE("mvp_jtj matches an explicit Jacobian and is symmetric") {
  std::mt19937_64 rng(6);
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    RectangularFlow rf = tiny_model(seed);
    Tensor z = random_tensor({2}, rng);
    Tensor e1 = random_tensor({2}, rng);
    Tensor e2 = random_tensor({2}, rng);
    Tensor J = testutil::fd_jacobian(rf.embedding(), z);
    CHECK(testutil::max_rel_err(mvp_jtj(rf.embedding(), z, e1), dense_jtj_times(J, e1)) < 1e-6);
    const double a = testutil::dot(e1, mvp_jtj(rf.embedding(), z, e2));
    const double b = testutil::dot(e2, mvp_jtj(rf.embedding(), z, e1));
    CHECK(testutil::rel_err(a, b) < 1e-9);
  }
}

TEST_CASE("build_jacobian") {
  RectangularFlow ident = tiny_model(2, false);
  Tensor z = Tensor::vector({0.3, -0.7});
  CHECK(max_abs_diff(build_jacobian(ident.embedding(), z), ident.pad().matrix()) == 0.0);

  RectangularFlow line(SquareFlow::realnvp(3, {2, {5}, true}, 4, "high."),
                       PadSpec::seeded(1, 3, 1), SquareFlow(1, "low."));
  randomize(line.params(), 3);
  Tensor J1 = build_jacobian(line.embedding(), Tensor::vector({0.4}));
  Tensor col = ad::jvp(line.embedding(), Tensor::vector({0.4}), Tensor::vector({1.0})).second;
  for (std::size_t r = 0; r < 3; ++r) CHECK(J1(r, 0) == col[r]);

  rect::RectSpec spec;
  spec.D = 5;
  spec.d = 2;
  spec.high = {3, {6}, true};
  RectangularFlow rf = RectangularFlow::build(spec, 8);
  randomize(rf.params(), 9);
  Tensor J = build_jacobian(rf.embedding(), z);
  CHECK(testutil::max_rel_err(J, testutil::fd_jacobian(rf.embedding(), z)) < 1e-5);
}

TEST_CASE("logdet_jtj_exact") {
  const PadSpec pad = PadSpec::seeded(3, 5, 2);
  CHECK(std::abs(logdet_jtj_exact(pad.matrix())) < 1e-15);
  const double s = 2.5;
  Tensor sJ = pad.matrix();
  for (auto& v : sJ.values()) v *= s;
  CHECK(logdet_jtj_exact(sJ) == doctest::Approx(2 * 3 * std::log(s)).epsilon(1e-14));

  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor J = random_tensor({7, 4}, rng);
    Eigen::MatrixXd G = to_eigen(J).transpose() * to_eigen(J);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(G);
    const double expect = es.eigenvalues().array().log().sum();
    CHECK(std::abs(logdet_jtj_exact(J) - expect) < 1e-8);
  }

  Tensor rank_deficient = Tensor::matrix({{1, 2}, {2, 4}, {0, 0}});
  try {
    logdet_jtj_exact(rank_deficient);
    FAIL("expected ConditioningError");
  } catch (const ConditioningError& e) {
    CHECK(e.smallest_pivot() < 1e-10);
  }
  CHECK(std::isfinite(logdet_jtj_exact(rank_deficient, 1e-8)));
}

TEST_CASE("grad_logdet_exact") {
  std::mt19937_64 rng(12);
  Tensor z = random_tensor({2}, rng);

  SUBCASE("agrees with finite differences at and away from the identity") {
    for (bool random : {false, true}) {
      RectangularFlow rf = tiny_model(3, random);
      std::vector<Tensor> g = grad_logdet_exact(rf.embedding(), z, rf.params());
      for (std::size_t i = 0; i < rf.params().size(); ++i) {
        Tensor fd = testutil::fd_param_grad(rf.params().entries()[i].var, [&] {
          return logdet_jtj_exact(build_jacobian(rf.embedding(), z));
        });
        CHECK(testutil::max_rel_err(g[i], fd) < 1e-6);
      }
    }
  }

  SUBCASE("low-flow parameters get zero gradient") {
    RectangularFlow rf = tiny_model(4);
    std::vector<Tensor> g = grad_logdet_exact(rf.embedding(), z, rf.params());
    for (std::size_t i = 0; i < rf.params().size(); ++i) {
      if (rf.params().entries()[i].name.rfind("low.", 0) == 0) {
        for (double v : g[i].values()) CHECK(v == 0.0);
      }
    }
  }

  SUBCASE("pure scaling: derivative of 2 d c is 2 d") {
    RectangularFlow rf = scaling_model(3, 5, 0.4);
    std::vector<Tensor> g =
        grad_logdet_exact(rf.embedding(), Tensor::vector({0.1, 0.2, 0.3}), rf.params());
    const Tensor& gc = g[1];  // shift, then log_scale
    REQUIRE(rf.params().entries()[1].name == "high.layer0.log_scale");
    double total = 0.0;
    for (double v : gc.values()) total += v;
    CHECK(total == doctest::Approx(6.0).epsilon(1e-13));
    for (std::size_t i : rf.pad().embed()) CHECK(gc[i] == doctest::Approx(2.0).epsilon(1e-13));
    for (std::size_t i : rf.pad().dropped()) CHECK(gc[i] == 0.0);
  }
}

TEST_CASE("stochastic surrogate at the identity") {
  RectangularFlow rf = tiny_model(5, false);
  StochasticEstimator cfg{3, 1e-10, ProbeKind::Gaussian};
  ProbeDistribution probes(ProbeKind::Gaussian, 21);
  ProbeDistribution replay(ProbeKind::Gaussian, 21);
  ad::GradModeGuard record(true);
  const Tensor z = Tensor::matrix({{0.2, -0.4}});
  SurrogateResult s = logdet_surrogate_stochastic(rf.embedding(), ad::constant(z), cfg, probes);
  std::vector<Tensor> eps;
  double expect = 0.0;
  for (int k = 0; k < 3; ++k) {
    eps.push_back(replay.draw(1, 2));
    expect += testutil::dot(eps.back(), eps.back()) / 3.0;
  }
  CHECK(s.value.value()[0] == doctest::Approx(expect).epsilon(1e-13));

  // J^T J = I here, so the gradient is (1/K) sum_k d/dtheta eps_k^T J^T J eps_k.
  std::vector<Tensor> g = ad::param_grad(ad::sum_all(s.value), rf.params());
  auto quad = [&] {
    double q = 0.0;
    for (const Tensor& e : eps) q += testutil::dot(e, mvp_jtj(rf.embedding(), z, e)) / 3.0;
    return q;
  };
  for (std::size_t i = 0; i < rf.params().size(); ++i) {
    Tensor fd = testutil::fd_param_grad(rf.params().entries()[i].var, quad);
    CHECK(testutil::max_rel_err(g[i], fd) < 1e-7);
  }
}

TEST_CASE("stochastic surrogate has zero gradient where the operator is constant") {
  // Shifts move the manifold without changing J.
  RectangularFlow rf = scaling_model(2, 4, 0.7);
  ad::Var shift = *rf.params().find("high.layer0.shift");
  shift.mutable_value()[0] = 1.5;
  ProbeDistribution probes(ProbeKind::Gaussian, 3);
  ad::GradModeGuard record(true);
  SurrogateResult s = logdet_surrogate_stochastic(
      rf.embedding(), ad::constant(Tensor::matrix({{0.2, -0.4}})), {2, 0.0}, probes);
  Tensor gs = ad::param_grad(ad::sum_all(s.value), rf.params())[0];
  for (double v : gs.values()) CHECK(v == 0.0);
}

TEST_CASE("stochastic surrogate on pure scaling") {
  const std::size_t d = 3;
  RectangularFlow rf = scaling_model(d, 5, 0.3);
  ad::GradModeGuard record(true);
  ad::Var z = ad::constant(Tensor::matrix({{0.5, -1.0, 0.25}}));
  SUBCASE("Rademacher probes give exactly 2d") {
    ProbeDistribution probes(ProbeKind::Rademacher, 1);
    for (int k = 0; k < 20; ++k) {
      SurrogateResult s = logdet_surrogate_stochastic(rf.embedding(), z, {1, 0.0}, probes);
      Tensor gc = ad::param_grad(ad::sum_all(s.value), rf.params())[1];
      double total = 0.0;
      for (double v : gc.values()) total += v;
      CHECK(total == doctest::Approx(2.0 * d).epsilon(1e-13));
    }
  }
  SUBCASE("Gaussian probes give 2|eps|^2 with mean 2d") {
    ProbeDistribution probes(ProbeKind::Gaussian, 2);
    ProbeDistribution replay(ProbeKind::Gaussian, 2);
    double mean = 0.0;
    const int n = 4000;
    for (int k = 0; k < n; ++k) {
      SurrogateResult s =
          logdet_surrogate_stochastic(rf.embedding(), z, {1, 0.0, ProbeKind::Gaussian}, probes);
      Tensor gc = ad::param_grad(ad::sum_all(s.value), rf.params())[1];
      double total = 0.0;
      for (double v : gc.values()) total += v;
      Tensor e = replay.draw(1, d);
      CHECK(total == doctest::Approx(2.0 * testutil::dot(e, e)).epsilon(1e-12));
      mean += total / n;
    }
    // Var of 2 chi^2_3 is 24.
    CHECK(std::abs(mean - 2.0 * d) < 4.0 * std::sqrt(24.0 / n));
  }
}

TEST_CASE("stochastic gradient is unbiased for the exact gradient") {
  RectangularFlow rf = tiny_model(6);
  Tensor z = Tensor::vector({0.3, -0.5});
  std::vector<Tensor> exact = grad_logdet_exact(rf.embedding(), z, rf.params());
  // Flattened coordinate sample over the high-flow parameters.
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  std::mt19937_64 pick(1);
  for (int i = 0; i < 20; ++i) {
    std::size_t p = pick() % rf.high_params().size();
    coords.push_back({p, pick() % exact[p].size()});
  }
  for (ProbeKind kind : {ProbeKind::Gaussian, ProbeKind::Rademacher}) {
    ProbeDistribution probes(kind, 31);
    const int n = 3000;
    std::vector<double> sum(coords.size()), sum_sq(coords.size());
    ad::GradModeGuard record(true);
    ad::Var zv = ad::constant(z.reshaped({1, 2}));
    for (int k = 0; k < n; ++k) {
      SurrogateResult s = logdet_surrogate_stochastic(rf.embedding(), zv, {1, 1e-12, kind}, probes);
      std::vector<Tensor> g = ad::param_grad(ad::sum_all(s.value), rf.params());
      for (std::size_t c = 0; c < coords.size(); ++c) {
        const double v = g[coords[c].first][coords[c].second];
        sum[c] += v;
        sum_sq[c] += v * v;
      }
    }
    int within = 0;
    for (std::size_t c = 0; c < coords.size(); ++c) {
      const double mean = sum[c] / n;
      const double var = (sum_sq[c] - n * mean * mean) / (n - 1);
      const double se = std::sqrt(std::max(var, 0.0) / n);
      const double target = exact[coords[c].first][coords[c].second];
      if (std::abs(mean - target) <= 3.0 * se + 1e-12) ++within;
    }
    CHECK(within >= 19);
  }
}

TEST_CASE("cost counters follow the jvp/vjp accounting") {
  RectangularFlow rf = tiny_model(7);
  ad::GradModeGuard record(true);
  ad::Var z = ad::constant(Tensor::matrix({{0.1, 0.2}}));

  ad::cost_counters().reset();
  ad::Var ld = logdet_jtj_var(rf.embedding(), z);
  ad::CostSnapshot exact = ad::cost_counters().snapshot();
  CHECK(exact.jvp == 2);
  CHECK(exact.jvp_retained == 2);
  CHECK(exact.vjp == 0);

  const std::size_t K = 3;
  ProbeDistribution probes(ProbeKind::Gaussian, 4);
  ad::cost_counters().reset();
  SurrogateResult s = logdet_surrogate_stochastic(rf.embedding(), z, {K, 1e-12}, probes);
  ad::CostSnapshot st = ad::cost_counters().snapshot();
  // Each probe's CG took max_cg_iterations or fewer; with d = 2 and a tight
  // tolerance every solve runs exactly 2 iterations.
  CHECK(s.max_cg_iterations == 2);
  CHECK(st.jvp == K * (2 + 1));
  CHECK(st.vjp == K * (2 + 1));
  CHECK(st.jvp_retained == K);
  CHECK(st.vjp_retained == K);
}
