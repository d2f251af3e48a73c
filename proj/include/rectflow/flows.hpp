#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "rectflow/autodiff.hpp"
#include "rectflow/maps.hpp"

namespace rectflow::flows {

using ad::Dual;
using ad::Index;
using ad::Var;

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

// Invertible layer acting row-wise on [batch, dim]. forward/inverse return
// the output together with log|det J| of that direction as [batch, 1].
class FlowLayer {
 public:
  virtual ~FlowLayer() = default;
  virtual std::string type_tag() const = 0;
  virtual std::size_t dim() const = 0;
  virtual std::pair<Var, Var> forward(const Var& x) const = 0;
  virtual std::pair<Var, Var> inverse(const Var& y) const = 0;
  virtual Dual forward(const Dual& x) const = 0;
  // Non-trainable structure (masks, permutations) for checkpoints.
  virtual NamedTensors structure() const { return {}; }
  virtual void load_structure(const NamedTensors&) {}
};

// y_out = x_out * exp(s) + t with (t, s) = coupler(x_in).
class AffineCouplingLayer final : public FlowLayer {
 public:
  AffineCouplingLayer(std::size_t dim, Index in_coords, Index out_coords,
                      ad::Sequential coupler);

  std::string type_tag() const override { return "affine_coupling"; }
  std::size_t dim() const override { return dim_; }
  std::pair<Var, Var> forward(const Var& x) const override;
  std::pair<Var, Var> inverse(const Var& y) const override;
  Dual forward(const Dual& x) const override;
  NamedTensors structure() const override;
  void load_structure(const NamedTensors& s) override;

  const Index& in_coords() const { return in_; }
  const Index& out_coords() const { return out_; }

 private:
  template <class V>
  V forward_impl(const V& x, Var* log_det) const;

  std::size_t dim_;
  Index in_;
  Index out_;
  Index shift_cols_;
  Index scale_cols_;
  ad::Sequential coupler_;
};

// y = x[perm]; volume preserving.
class FixedPermutationLayer final : public FlowLayer {
 public:
  explicit FixedPermutationLayer(Index permutation);
  static FixedPermutationLayer seeded(std::size_t dim, std::uint64_t seed);

  std::string type_tag() const override { return "permutation"; }
  std::size_t dim() const override { return perm_.size(); }
  std::pair<Var, Var> forward(const Var& x) const override;
  std::pair<Var, Var> inverse(const Var& y) const override;
  Dual forward(const Dual& x) const override;
  NamedTensors structure() const override;
  void load_structure(const NamedTensors& s) override;
  const Index& permutation() const { return perm_; }

 private:
  Index perm_;
  Index inverse_;
};

// y = x * exp(log_scale) + shift with per-coordinate learnable parameters.
class ElementwiseAffineLayer final : public FlowLayer {
 public:
  ElementwiseAffineLayer(Var shift, Var log_scale);

  std::string type_tag() const override { return "elementwise_affine"; }
  std::size_t dim() const override { return shift_.value().size(); }
  std::pair<Var, Var> forward(const Var& x) const override;
  std::pair<Var, Var> inverse(const Var& y) const override;
  Dual forward(const Dual& x) const override;
  const Var& shift() const { return shift_; }
  const Var& log_scale() const { return log_scale_; }

 private:
  Var shift_;
  Var log_scale_;
};

struct RealNvpSpec {
  std::size_t layers = 5;
  std::vector<std::size_t> hidden{10, 10};
  bool permute = true;
};

// Composition of invertible layers on R^dim. Owns the parameters of its
// layers. With no layers it is the identity.
class SquareFlow final : public ad::DifferentiableMap {
 public:
  explicit SquareFlow(std::size_t dim, std::string prefix = "");
  SquareFlow(SquareFlow&&) = default;
  SquareFlow& operator=(SquareFlow&&) = default;

  // Alternating-half coupling masks, a seeded permutation between couplings,
  // and zero-initialized coupler outputs so the flow starts as the identity.
  static SquareFlow realnvp(std::size_t dim, const RealNvpSpec& spec,
                            std::uint64_t seed, std::string prefix = "");
  // Single shift-and-scale layer, identity at initialization.
  static SquareFlow elementwise_affine(std::size_t dim, std::string prefix = "");

  std::size_t dim() const { return dim_; }
  std::size_t input_dim() const override { return dim_; }
  std::size_t output_dim() const override { return dim_; }
  std::size_t num_layers() const { return layers_.size(); }
  const FlowLayer& layer(std::size_t i) const { return *layers_[i]; }

  ad::ParamStore& params() { return params_; }
  const ad::ParamStore& params() const { return params_; }
  const std::string& prefix() const { return prefix_; }

  void add_coupling(const Index& in_coords, const Index& out_coords,
                    const std::vector<std::size_t>& hidden, std::uint64_t seed);
  void add_permutation(Index permutation);
  void add_elementwise_affine();

  std::pair<Var, Var> forward(const Var& z) const;
  std::pair<Var, Var> inverse(const Var& x) const;
  Var apply(const Var& z) const override { return forward(z).first; }
  Dual apply(const Dual& z) const override;

  NamedTensors structure() const;
  void load_structure(const NamedTensors& s);

 private:
  std::size_t dim_;
  std::string prefix_;
  ad::ParamStore params_;
  std::vector<std::unique_ptr<FlowLayer>> layers_;
};

class StandardGaussian {
 public:
  explicit StandardGaussian(std::size_t dim) : dim_(dim) {}
  std::size_t dim() const { return dim_; }
  // Row-wise log density, [batch, 1].
  Var log_prob(const Var& z) const;
  Tensor sample(std::size_t n, std::mt19937_64& rng) const;

 private:
  std::size_t dim_;
};

// Value-level API. Inputs are a single point (rank 1) or a batch.
std::pair<Tensor, Tensor> flow_forward(const SquareFlow& flow, const Tensor& z);
std::pair<Tensor, Tensor> flow_inverse(const SquareFlow& flow, const Tensor& x);
Tensor square_log_prob(const SquareFlow& flow, const StandardGaussian& base,
                       const Tensor& x);
Tensor flow_sample(const SquareFlow& flow, const StandardGaussian& base,
                   std::size_t n, std::mt19937_64& rng);

}  // namespace rectflow::flows
