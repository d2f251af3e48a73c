#pragma once

#include <cstdint>
#include <memory>
#include <string>

#include "rectflow/autodiff.hpp"
#include "rectflow/flows.hpp"
#include "rectflow/maps.hpp"

namespace rectflow::rect {

using ad::Dual;
using ad::Index;
using ad::Var;
using flows::SquareFlow;
using flows::StandardGaussian;

// Zero-padding from R^d into R^D. Coordinate i of z lands at position
// embed[i]; every other position is zero.
class PadSpec {
 public:
  PadSpec(std::size_t d, std::size_t D, Index embed);
  static PadSpec identity(std::size_t d, std::size_t D);
  static PadSpec seeded(std::size_t d, std::size_t D, std::uint64_t seed);

  std::size_t low_dim() const { return d_; }
  std::size_t high_dim() const { return D_; }
  const Index& embed() const { return embed_; }
  Index dropped() const;

  Var pad(const Var& z) const;
  Dual pad(const Dual& z) const;
  Var unpad(const Var& x) const;
  Tensor pad(const Tensor& z) const;
  Tensor unpad(const Tensor& x) const;
  // [D, d] matrix of the embedding.
  Tensor matrix() const;

 private:
  std::size_t d_;
  std::size_t D_;
  Index embed_;
};

// f = high o pad as a map R^d -> R^D.
class EmbeddingMap final : public ad::DifferentiableMap {
 public:
  EmbeddingMap(std::shared_ptr<const SquareFlow> high, PadSpec pad)
      : high_(std::move(high)), pad_(std::move(pad)) {}
  std::size_t input_dim() const override { return pad_.low_dim(); }
  std::size_t output_dim() const override { return pad_.high_dim(); }
  Var apply(const Var& z) const override;
  Dual apply(const Dual& z) const override;

 private:
  std::shared_ptr<const SquareFlow> high_;
  PadSpec pad_;
};

struct LowFlowSpec {
  enum class Kind { None, Affine, RealNvp };
  Kind kind = Kind::None;
  flows::RealNvpSpec realnvp{};
};

struct RectSpec {
  std::size_t D = 2;
  std::size_t d = 1;
  flows::RealNvpSpec high{};
  LowFlowSpec low{};
  bool identity_pad = false;
};

// g = high o pad o low with left inverse low^-1 o unpad o high^-1.
class RectangularFlow {
 public:
  RectangularFlow(SquareFlow high, PadSpec pad, SquareFlow low);
  static RectangularFlow build(const RectSpec& spec, std::uint64_t seed);

  std::size_t low_dim() const { return pad_.low_dim(); }
  std::size_t high_dim() const { return pad_.high_dim(); }
  const SquareFlow& high() const { return *high_; }
  const SquareFlow& low() const { return *low_; }
  SquareFlow& high() { return *high_; }
  SquareFlow& low() { return *low_; }
  const PadSpec& pad() const { return pad_; }
  const StandardGaussian& base() const { return base_; }
  // The map f = high o pad whose Jacobian enters the volume term.
  const EmbeddingMap& embedding() const { return *embedding_; }

  // All parameters, high flow first. Shares leaves with the flows.
  const ad::ParamStore& params() const { return params_; }
  ad::ParamStore& params() { return params_; }
  const ad::ParamStore& high_params() const { return high_->params(); }
  const ad::ParamStore& low_params() const { return low_->params(); }

  Var f(const Var& z) const;
  Var f_dagger(const Var& x) const;
  Var g(const Var& u) const;
  Var g_dagger(const Var& x) const;
  // Row-wise ||x - f(f_dagger(x))||^2, [batch, 1].
  Var reconstruction_error(const Var& x) const;

  flows::NamedTensors structure() const;
  void load_structure(const flows::NamedTensors& s);

 private:
  std::shared_ptr<SquareFlow> high_;
  std::shared_ptr<SquareFlow> low_;
  PadSpec pad_;
  StandardGaussian base_;
  std::shared_ptr<EmbeddingMap> embedding_;
  ad::ParamStore params_;
};

// Value-level API; inputs are a single point (rank 1) or a batch.
Tensor g_forward(const RectangularFlow& rf, const Tensor& z);
Tensor g_left_inverse(const RectangularFlow& rf, const Tensor& x);
Tensor project(const RectangularFlow& rf, const Tensor& x);
Tensor reconstruction_error(const RectangularFlow& rf, const Tensor& x);

// Graph-level pieces of the injective log density at x, each [batch, 1].
struct DensityTerms {
  Var base_log_prob;   // log p_Z(g_dagger x)
  Var low_logdet;      // log|det J_low^-1| at f_dagger x
  Var half_logdet;     // 0.5 log det J_f^T J_f at f_dagger x
  Var log_density;     // base_log_prob + low_logdet - half_logdet
};
DensityTerms density_terms(const RectangularFlow& rf, const Var& x, double jitter = 0.0);

// Exact injective log density, scored at the projection of x.
Tensor rect_log_density(const RectangularFlow& rf, const Tensor& x, double jitter = 0.0);

constexpr double kDefaultJitter = 1e-8;

// Distances between consecutive images f(grid_i), f(grid_{i+1}); d must be 1.
Tensor speed_profile(const RectangularFlow& rf, const Tensor& grid);

// Samples g(u), u ~ base.
Tensor rect_sample(const RectangularFlow& rf, std::size_t n, std::mt19937_64& rng);

}  // namespace rectflow::rect
