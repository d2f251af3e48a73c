#pragma once

#include <cstddef>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "rectflow/autodiff.hpp"

namespace rectflow::ad {

// A batched map R^in -> R^out acting row-wise on [batch, in] inputs. Every
// map evaluates both on plain values and on dual numbers.
class DifferentiableMap {
 public:
  virtual ~DifferentiableMap() = default;
  virtual std::size_t input_dim() const = 0;
  virtual std::size_t output_dim() const = 0;
  virtual Var apply(const Var& x) const = 0;
  virtual Dual apply(const Dual& x) const = 0;
};

// Implements both apply overloads from a single `run<V>` template.
template <class Derived>
class MapBase : public DifferentiableMap {
 public:
  Var apply(const Var& x) const override {
    return static_cast<const Derived&>(*this).template run<Var>(x);
  }
  Dual apply(const Dual& x) const override {
    return static_cast<const Derived&>(*this).template run<Dual>(x);
  }
};

class IdentityMap final : public MapBase<IdentityMap> {
 public:
  explicit IdentityMap(std::size_t dim) : dim_(dim) {}
  std::size_t input_dim() const override { return dim_; }
  std::size_t output_dim() const override { return dim_; }
  template <class V>
  V run(const V& x) const {
    return x;
  }

 private:
  std::size_t dim_;
};

// x W^T + b with W [out, in].
class LinearMap final : public MapBase<LinearMap> {
 public:
  LinearMap(Var weight, Var bias);
  std::size_t input_dim() const override { return weight_.cols(); }
  std::size_t output_dim() const override { return weight_.rows(); }
  template <class V>
  V run(const V& x) const {
    return linear(x, weight_, bias_);
  }
  const Var& weight() const { return weight_; }
  const Var& bias() const { return bias_; }

 private:
  Var weight_;
  Var bias_;
};

class TanhMap final : public MapBase<TanhMap> {
 public:
  explicit TanhMap(std::size_t dim) : dim_(dim) {}
  std::size_t input_dim() const override { return dim_; }
  std::size_t output_dim() const override { return dim_; }
  template <class V>
  V run(const V& x) const {
    return tanh(x);
  }

 private:
  std::size_t dim_;
};

class ExpMap final : public MapBase<ExpMap> {
 public:
  explicit ExpMap(std::size_t dim) : dim_(dim) {}
  std::size_t input_dim() const override { return dim_; }
  std::size_t output_dim() const override { return dim_; }
  template <class V>
  V run(const V& x) const {
    return exp(x);
  }

 private:
  std::size_t dim_;
};

class SquareMap final : public MapBase<SquareMap> {
 public:
  explicit SquareMap(std::size_t dim) : dim_(dim) {}
  std::size_t input_dim() const override { return dim_; }
  std::size_t output_dim() const override { return dim_; }
  template <class V>
  V run(const V& x) const {
    return square(x);
  }

 private:
  std::size_t dim_;
};

// Composition in order. Checks every intermediate for finiteness and reports
// the index of the first layer that produced a non-finite value.
class Sequential final : public DifferentiableMap {
 public:
  Sequential() = default;
  explicit Sequential(std::vector<std::shared_ptr<const DifferentiableMap>> layers);
  void push_back(std::shared_ptr<const DifferentiableMap> layer);

  std::size_t input_dim() const override;
  std::size_t output_dim() const override;
  Var apply(const Var& x) const override;
  Dual apply(const Dual& x) const override;
  std::size_t size() const { return layers_.size(); }

 private:
  std::vector<std::shared_ptr<const DifferentiableMap>> layers_;
};

// Tanh MLP: linear layers with tanh between them (none after the last).
// Weights are registered in `params` under `prefix`.
Sequential make_mlp(ParamStore& params, const std::string& prefix,
                    const std::vector<std::size_t>& widths, std::uint64_t seed,
                    bool zero_last = false);

// Public entry points. Inputs may be a single point (rank 1) or a batch
// [batch, in]; outputs follow the same convention.
Tensor evaluate(const DifferentiableMap& map, const Tensor& input);
std::pair<Tensor, Tensor> jvp(const DifferentiableMap& map, const Tensor& input,
                              const Tensor& tangent);
Tensor vjp(const DifferentiableMap& map, const Tensor& input,
           const Tensor& cotangent);

// Graph-level forms used by the estimators. The input may itself depend on
// parameters. jvp_var records a tape when recording is enabled; vjp_var with
// create_graph=true keeps the result differentiable.
Dual jvp_var(const DifferentiableMap& map, const Var& input, const Var& tangent);
Var vjp_var(const DifferentiableMap& map, const Var& input, const Var& cotangent,
            bool create_graph);
// Backward step only, against an already recorded output of `input`.
Var vjp_recorded(const Var& output, const Var& input, const Var& cotangent,
                 bool create_graph);

}  // namespace rectflow::ad
