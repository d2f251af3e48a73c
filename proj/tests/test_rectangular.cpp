#include <Eigen/Dense>
#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "rectflow/errors.hpp"
#include "rectflow/estimators.hpp"
#include "rectflow/rectangular.hpp"
#include "test_util.hpp"

using namespace rectflow;
using namespace rectflow::rect;
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

RectangularFlow make_model(std::size_t D, std::size_t d, std::uint64_t seed, bool random,
                           LowFlowSpec::Kind low = LowFlowSpec::Kind::RealNvp) {
  RectSpec spec;
  spec.D = D;
  spec.d = d;
  spec.high = {3, {6}, true};
  spec.low.kind = (d < 2 && low == LowFlowSpec::Kind::RealNvp) ? LowFlowSpec::Kind::Affine : low;
  spec.low.realnvp = {2, {4}, true};
  RectangularFlow rf = RectangularFlow::build(spec, seed);
  if (random) randomize(rf.params(), seed * 7 + 1, 0.3);
  return rf;
}

// g = f o low as a map, for dense oracles.
class GMap final : public ad::DifferentiableMap {
 public:
  explicit GMap(const RectangularFlow& rf) : rf_(rf) {}
  std::size_t input_dim() const override { return rf_.low_dim(); }
  std::size_t output_dim() const override { return rf_.high_dim(); }
  ad::Var apply(const ad::Var& u) const override { return rf_.g(u); }
  ad::Dual apply(const ad::Dual& u) const override {
    return rf_.embedding().apply(rf_.low().apply(u));
  }

 private:
  const RectangularFlow& rf_;
};

double gauss_log_prob(const Tensor& u) {
  double s = 0.0;
  for (double v : u.values()) s += v * v;
  return -0.5 * s - 0.5 * u.size() * std::log(2 * std::numbers::pi);
}

}  // namespace

TEST_CASE("pad and its left inverse") {
  PadSpec p = PadSpec::identity(2, 3);
  Tensor x = p.pad(Tensor::vector({1.0, 2.0}));
  CHECK(x.storage() == std::vector<double>{1.0, 2.0, 0.0});

  std::mt19937_64 rng(1);
  PadSpec q = PadSpec::seeded(3, 7, 4);
  Tensor z = random_tensor({10, 3}, rng);
  CHECK(q.unpad(q.pad(z)).storage() == z.storage());
  CHECK(q.dropped().size() == 4);

  CHECK_THROWS_AS(PadSpec(3, 2, {0, 1, 2}), InputError);
  CHECK_THROWS_AS(PadSpec(2, 4, {1, 1}), InputError);
  CHECK_THROWS_AS(q.pad(Tensor::vector({1.0, 2.0})), InputError);
}

TEST_CASE("jvp of pad is multiplication by the embedding matrix") {
  PadSpec p = PadSpec::seeded(2, 5, 9);
  EmbeddingMap pad_only(std::make_shared<SquareFlow>(5), p);
  Eigen::MatrixXd P = to_eigen(p.matrix());
  std::mt19937_64 rng(2);
  for (int i = 0; i < 5; ++i) {
    Tensor z = random_tensor({2}, rng);
    Tensor e = random_tensor({2}, rng);
    Tensor t = ad::jvp(pad_only, z, e).second;
    Eigen::Vector2d ev(e[0], e[1]);
    Eigen::VectorXd expect = P * ev;
    for (std::size_t r = 0; r < 5; ++r) CHECK(t[r] == expect(r));
  }
}

TEST_CASE("identity-initialized g is pad") {
  RectangularFlow rf = make_model(4, 2, 3, false);
  Tensor z = Tensor::vector({0.7, -1.3});
  CHECK(max_abs_diff(g_forward(rf, z), rf.pad().pad(z)) == 0.0);
}

TEST_CASE("left inverse and projection idempotence") {
  std::mt19937_64 rng(4);
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    RectangularFlow rf = make_model(5, 2, seed, true);
    Tensor z = random_tensor({50, 2}, rng);
    CHECK(max_abs_diff(g_left_inverse(rf, g_forward(rf, z)), z) < 1e-8);
    Tensor x = random_tensor({50, 5}, rng);
    Tensor p1 = project(rf, x);
    CHECK(max_abs_diff(project(rf, p1), p1) < 1e-8);
  }
}

TEST_CASE("reconstruction error") {
  std::mt19937_64 rng(5);
  RectangularFlow rf = make_model(4, 2, 6, true);
  Tensor on = g_forward(rf, random_tensor({20, 2}, rng));
  for (double v : reconstruction_error(rf, on).values()) CHECK(std::abs(v) < 1e-12);

  RectangularFlow line = make_model(2, 1, 7, false, LowFlowSpec::Kind::None);
  const std::size_t dropped = line.pad().dropped()[0];
  Tensor x = Tensor::vector({0.8, -1.9});
  CHECK(reconstruction_error(line, x).item() == doctest::Approx(x[dropped] * x[dropped]).epsilon(1e-15));

  // Swapping the low flow leaves the error unchanged.
  Tensor off = random_tensor({20, 4}, rng);
  Tensor before = reconstruction_error(rf, off);
  randomize(rf.low_params(), 99, 1.0);
  CHECK(reconstruction_error(rf, off).storage() == before.storage());
}

TEST_CASE("d = D reduces to the square change of variables") {
  std::mt19937_64 rng(8);
  for (std::uint64_t seed : {1u, 2u}) {
    RectangularFlow rf = make_model(3, 3, seed, true);
    Tensor x = random_tensor({100, 3}, rng);
    Tensor ld = rect_log_density(rf, x);
    auto [zp, ld_high] = flows::flow_inverse(rf.high(), x);
    auto [u, ld_low] = flows::flow_inverse(rf.low(), rf.pad().unpad(zp));
    for (std::size_t i = 0; i < 100; ++i) {
      const double expect = gauss_log_prob(u.row(i)) + ld_high[i] + ld_low[i];
      CHECK(std::abs(ld[i] - expect) < 1e-8);
    }
  }
  // Identity padding and an identity low flow: exactly square_log_prob of f.
  RectSpec spec;
  spec.D = spec.d = 2;
  spec.identity_pad = true;
  RectangularFlow sq = RectangularFlow::build(spec, 3);
  randomize(sq.params(), 4);
  Tensor x = random_tensor({20, 2}, rng);
  Tensor expect = flows::square_log_prob(sq.high(), flows::StandardGaussian(2), x);
  CHECK(testutil::max_rel_err(rect_log_density(sq, x), expect) < 1e-8);
}

TEST_CASE("rect_log_density closed form at identity") {
  RectangularFlow rf = make_model(2, 1, 1, false, LowFlowSpec::Kind::None);
  CHECK(rect_log_density(rf, Tensor::vector({0.0, 0.0})).item() ==
        doctest::Approx(-0.5 * std::log(2 * std::numbers::pi)).epsilon(1e-15));
}

TEST_CASE("rect_log_density matches a finite-difference Jacobian oracle") {
  std::mt19937_64 rng(9);
  RectangularFlow rf = make_model(4, 2, 11, true);
  for (int i = 0; i < 5; ++i) {
    Tensor x = random_tensor({4}, rng);
    Tensor zp = rf.pad().unpad(flows::flow_inverse(rf.high(), x).first);
    auto [u, ld_low] = flows::flow_inverse(rf.low(), zp);
    Eigen::MatrixXd J = to_eigen(testutil::fd_jacobian(rf.embedding(), zp));
    const double half = 0.5 * std::log((J.transpose() * J).determinant());
    const double expect = gauss_log_prob(u) + ld_low.item() - half;
    CHECK(std::abs(rect_log_density(rf, x).item() - expect) < 1e-6);
  }
}

TEST_CASE("injective log-det decomposes into low and high terms") {
  std::mt19937_64 rng(10);
  for (std::size_t D : {3u, 4u, 6u}) {
    RectangularFlow rf = make_model(D, 2, D, true);
    GMap g(rf);
    for (int i = 0; i < 3; ++i) {
      Tensor u = random_tensor({2}, rng);
      Eigen::MatrixXd Jg = to_eigen(testutil::fd_jacobian(g, u));
      const double combined = 0.5 * std::log((Jg.transpose() * Jg).determinant());
      Tensor z = flows::flow_forward(rf.low(), u).first;
      Eigen::MatrixXd Jh = to_eigen(testutil::fd_jacobian(rf.low(), u));
      Eigen::MatrixXd Jf = to_eigen(testutil::fd_jacobian(rf.embedding(), z));
      const double split = std::log(std::abs(Jh.determinant())) +
                           0.5 * std::log((Jf.transpose() * Jf).determinant());
      CHECK(std::abs(combined - split) < 1e-6);
    }
  }
}

TEST_CASE("the volume term does not depend on the low flow") {
  std::mt19937_64 rng(12);
  RectangularFlow rf = make_model(4, 2, 13, true);
  ad::NoGradGuard no_grad;
  ad::Var x = ad::constant(random_tensor({10, 4}, rng));
  Tensor before = density_terms(rf, x).half_logdet.value();
  randomize(rf.low_params(), 5, 1.0);
  CHECK(density_terms(rf, x).half_logdet.value().storage() == before.storage());
}

TEST_CASE("rect_log_density conditioning failure and jitter") {
  // A zero scale on the embedded coordinate collapses J.
  RectangularFlow rf(SquareFlow::elementwise_affine(2, "high."), PadSpec::identity(1, 2),
                     SquareFlow(1, "low."));
  ad::Var c = *rf.params().find("high.layer0.log_scale");
  c.mutable_value()[0] = -400.0;
  CHECK_THROWS_AS(rect_log_density(rf, Tensor::vector({0.0, 0.0})), ConditioningError);
  CHECK(std::isfinite(rect_log_density(rf, Tensor::vector({0.0, 0.0}), kDefaultJitter).item()));
}

TEST_CASE("speed profile") {
  Tensor grid({11});
  const double h = 0.6;
  for (std::size_t i = 0; i < 11; ++i) grid[i] = -3.0 + h * i;

  RectangularFlow ident = make_model(2, 1, 1, false, LowFlowSpec::Kind::None);
  for (double v : speed_profile(ident, grid).values()) CHECK(v == doctest::Approx(h).epsilon(1e-14));

  const double s = 2.3;
  RectangularFlow scaled(SquareFlow::elementwise_affine(2, "high."), PadSpec::seeded(1, 2, 3),
                         SquareFlow(1, "low."));
  ad::Var c = *scaled.params().find("high.layer0.log_scale");
  for (auto& v : c.mutable_value().values()) v = std::log(s);
  for (double v : speed_profile(scaled, grid).values()) CHECK(v == doctest::Approx(s * h).epsilon(1e-13));

  RectangularFlow trained = make_model(2, 1, 2, true, LowFlowSpec::Kind::None);
  Tensor sp = speed_profile(trained, grid);
  Tensor pts = g_forward(trained, grid.reshaped({11, 1}));
  for (std::size_t i = 0; i + 1 < 11; ++i) {
    const double dx = pts(i + 1, 0) - pts(i, 0);
    const double dy = pts(i + 1, 1) - pts(i, 1);
    CHECK(std::abs(sp[i] - std::sqrt(dx * dx + dy * dy)) < 1e-9);
  }

  CHECK_THROWS_AS(speed_profile(make_model(4, 2, 1, false), grid), UnsupportedError);
}

TEST_CASE("structure round trip restores the padding") {
  RectangularFlow a = make_model(5, 2, 21, true);
  RectangularFlow b = make_model(5, 2, 22, false);
  b.load_structure(a.structure());
  b.params().restore(a.params().snapshot());
  std::mt19937_64 rng(3);
  Tensor x = random_tensor({10, 5}, rng);
  CHECK(rect_log_density(a, x).storage() == rect_log_density(b, x).storage());
}

TEST_CASE("rect_sample lies on the manifold") {
  RectangularFlow rf = make_model(3, 1, 4, true);
  std::mt19937_64 rng(6);
  Tensor x = rect_sample(rf, 30, rng);
  for (double v : reconstruction_error(rf, x).values()) CHECK(v < 1e-12);
}
