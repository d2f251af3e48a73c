#include "rectflow/maps.hpp"

#include <cmath>
#include <random>

#include "rectflow/errors.hpp"

namespace rectflow::ad {

namespace {

void check_finite(const Var& v, std::size_t layer) {
  if (!v.value().all_finite()) {
    throw NumericError("non-finite output at layer " + std::to_string(layer),
                       static_cast<int>(layer));
  }
}

// Rank-1 inputs are single points; lift them to one-row batches.
Tensor as_batch(const Tensor& t, std::size_t dim, const char* what) {
  if (t.rank() == 1 && t.size() == dim) return t.reshaped({1, dim});
  if (t.rank() == 2 && t.cols() == dim) return t;
  throw InputError(std::string(what) + " shape " + shape_string(t.shape()) +
                   " does not match dimension " + std::to_string(dim));
}

Tensor like_input(const Tensor& out, const Tensor& input) {
  if (input.rank() == 1) return out.reshaped({out.size()});
  return out;
}

}  // namespace

LinearMap::LinearMap(Var weight, Var bias)
    : weight_(std::move(weight)), bias_(std::move(bias)) {
  if (weight_.value().rank() != 2) throw InputError("LinearMap weight must be rank 2");
  if (bias_.defined() && bias_.value().size() != weight_.rows()) {
    throw InputError("LinearMap bias size mismatch");
  }
}

Sequential::Sequential(std::vector<std::shared_ptr<const DifferentiableMap>> layers) {
  for (auto& l : layers) push_back(std::move(l));
}

void Sequential::push_back(std::shared_ptr<const DifferentiableMap> layer) {
  if (!layers_.empty() && layers_.back()->output_dim() != layer->input_dim()) {
    throw InputError("Sequential: layer dimensions do not chain");
  }
  layers_.push_back(std::move(layer));
}

std::size_t Sequential::input_dim() const {
  return layers_.empty() ? 0 : layers_.front()->input_dim();
}

std::size_t Sequential::output_dim() const {
  return layers_.empty() ? 0 : layers_.back()->output_dim();
}

Var Sequential::apply(const Var& x) const {
  Var h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i]->apply(h);
    check_finite(h, i);
  }
  return h;
}

Dual Sequential::apply(const Dual& x) const {
  Dual h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i]->apply(h);
    check_finite(h.primal, i);
    check_finite(h.tangent, i);
  }
  return h;
}

Sequential make_mlp(ParamStore& params, const std::string& prefix,
                    const std::vector<std::size_t>& widths, std::uint64_t seed,
                    bool zero_last) {
  if (widths.size() < 2) throw InputError("make_mlp needs at least two widths");
  std::mt19937_64 rng(seed);
  Sequential net;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const std::size_t in = widths[l];
    const std::size_t out = widths[l + 1];
    const bool last = l + 2 == widths.size();
    Tensor w({out, in});
    if (!(last && zero_last)) {
      // Glorot uniform.
      const double a = std::sqrt(6.0 / static_cast<double>(in + out));
      std::uniform_real_distribution<double> dist(-a, a);
      for (auto& v : w.values()) v = dist(rng);
    }
    Var weight = params.add(prefix + "w" + std::to_string(l), std::move(w));
    Var bias = params.add(prefix + "b" + std::to_string(l), Tensor({1, out}));
    net.push_back(std::make_shared<LinearMap>(weight, bias));
    if (!last) net.push_back(std::make_shared<TanhMap>(out));
  }
  return net;
}

Tensor evaluate(const DifferentiableMap& map, const Tensor& input) {
  Tensor x = as_batch(input, map.input_dim(), "input");
  Var out = map.apply(constant(x));
  if (!out.value().all_finite()) throw NumericError("non-finite output");
  return like_input(out.value(), input);
}

std::pair<Tensor, Tensor> jvp(const DifferentiableMap& map, const Tensor& input,
                              const Tensor& tangent) {
  if (tangent.shape() != input.shape()) {
    throw InputError("jvp: tangent shape " + shape_string(tangent.shape()) +
                     " differs from input shape " + shape_string(input.shape()));
  }
  NoGradGuard no_grad;
  Tensor x = as_batch(input, map.input_dim(), "input");
  Tensor t = as_batch(tangent, map.input_dim(), "tangent");
  Dual out = jvp_var(map, constant(x), constant(t));
  return {like_input(out.primal.value(), input), like_input(out.tangent.value(), input)};
}

Tensor vjp(const DifferentiableMap& map, const Tensor& input, const Tensor& cotangent) {
  Tensor x = as_batch(input, map.input_dim(), "input");
  Tensor v = as_batch(cotangent, map.output_dim(), "cotangent");
  if (v.rows() != x.rows()) throw InputError("vjp: batch size mismatch");
  GradModeGuard record(true);
  Var out = vjp_var(map, Var(x, true), constant(v), false);
  return like_input(out.value(), input);
}

Dual jvp_var(const DifferentiableMap& map, const Var& input, const Var& tangent) {
  if (input.cols() != map.input_dim()) {
    throw InputError("jvp: input shape " + shape_string(input.shape()) +
                     " does not match map input dimension " +
                     std::to_string(map.input_dim()));
  }
  Dual out = map.apply(make_dual(input, tangent));
  cost_counters().count_jvp(grad_enabled() && out.tangent.requires_grad());
  return out;
}

Var vjp_var(const DifferentiableMap& map, const Var& input, const Var& cotangent,
            bool create_graph) {
  Var x = input;
  if (!x.requires_grad()) {
    // Needs a tape rooted at the input even if nothing upstream tracks it.
    x = Var(input.value(), true);
  }
  Var out;
  {
    GradModeGuard record(true);
    out = map.apply(x);
  }
  return vjp_recorded(out, x, cotangent, create_graph);
}

Var vjp_recorded(const Var& output, const Var& input, const Var& cotangent,
                 bool create_graph) {
  if (cotangent.shape() != output.shape()) {
    throw InputError("vjp: cotangent shape " + shape_string(cotangent.shape()) +
                     " differs from output shape " + shape_string(output.shape()));
  }
  if (!output.requires_grad()) {
    throw InputError("vjp: no tape recorded for this output");
  }
  std::vector<Var> wrt{input};
  Var g = grad(output, wrt, cotangent, create_graph).front();
  cost_counters().count_vjp(create_graph);
  return g;
}

}  // namespace rectflow::ad
