#include "rectflow/flows.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "rectflow/errors.hpp"

namespace rectflow::flows {

namespace {

Tensor index_tensor(const Index& idx) {
  std::vector<double> v(idx.begin(), idx.end());
  return Tensor::vector(std::move(v));
}

Index tensor_index(const Tensor& t) {
  Index idx;
  for (double v : t.values()) idx.push_back(static_cast<std::size_t>(v));
  return idx;
}

const Tensor* lookup(const NamedTensors& s, const std::string& name) {
  for (const auto& [n, t] : s) {
    if (n == name) return &t;
  }
  return nullptr;
}

Index range(std::size_t begin, std::size_t end) {
  Index idx(end - begin);
  std::iota(idx.begin(), idx.end(), begin);
  return idx;
}

Tensor as_batch(const Tensor& t, std::size_t dim) {
  if (t.rank() == 1 && t.size() == dim) return t.reshaped({1, dim});
  if (t.rank() == 2 && t.cols() == dim) return t;
  throw InputError("flow input shape " + shape_string(t.shape()) +
                   " does not match dimension " + std::to_string(dim));
}

Tensor like_input(const Tensor& out, const Tensor& input) {
  if (input.rank() == 1) return out.reshaped({out.size()});
  return out;
}

void check_layer(const Var& v, std::size_t layer) {
  if (!v.value().all_finite()) {
    throw NumericError("non-finite activation at flow layer " + std::to_string(layer),
                       static_cast<int>(layer));
  }
}

}  // namespace

AffineCouplingLayer::AffineCouplingLayer(std::size_t dim, Index in_coords,
                                         Index out_coords, ad::Sequential coupler)
    : dim_(dim),
      in_(std::move(in_coords)),
      out_(std::move(out_coords)),
      coupler_(std::move(coupler)) {
  if (in_.empty() || out_.empty() || in_.size() + out_.size() != dim_) {
    throw InputError("coupling mask needs active and inactive coordinates covering the dimension");
  }
  if (coupler_.input_dim() != in_.size() || coupler_.output_dim() != 2 * out_.size()) {
    throw InputError("coupler dimensions do not match the mask");
  }
  shift_cols_ = range(0, out_.size());
  scale_cols_ = range(out_.size(), 2 * out_.size());
}

template <class V>
V AffineCouplingLayer::forward_impl(const V& x, Var* log_det) const {
  V x_in = ad::select_cols(x, in_);
  V x_out = ad::select_cols(x, out_);
  V h = coupler_.apply(x_in);
  V shift = ad::select_cols(h, shift_cols_);
  V log_scale = ad::select_cols(h, scale_cols_);
  V y_out = ad::add(ad::mul(x_out, ad::exp(log_scale)), shift);
  if constexpr (std::is_same_v<V, Var>) {
    if (log_det) *log_det = ad::sum_cols(log_scale);
  } else {
    if (log_det) *log_det = ad::sum_cols(log_scale.primal);
  }
  return ad::add(ad::scatter_cols(x_in, in_, dim_), ad::scatter_cols(y_out, out_, dim_));
}

std::pair<Var, Var> AffineCouplingLayer::forward(const Var& x) const {
  Var log_det;
  Var y = forward_impl(x, &log_det);
  return {y, log_det};
}

Dual AffineCouplingLayer::forward(const Dual& x) const {
  return forward_impl<Dual>(x, nullptr);
}

std::pair<Var, Var> AffineCouplingLayer::inverse(const Var& y) const {
  Var y_in = ad::select_cols(y, in_);
  Var y_out = ad::select_cols(y, out_);
  Var h = coupler_.apply(y_in);
  Var shift = ad::select_cols(h, shift_cols_);
  Var log_scale = ad::select_cols(h, scale_cols_);
  Var x_out = ad::mul(ad::sub(y_out, shift), ad::exp(ad::neg(log_scale)));
  Var x = ad::add(ad::scatter_cols(y_in, in_, dim_), ad::scatter_cols(x_out, out_, dim_));
  return {x, ad::neg(ad::sum_cols(log_scale))};
}

NamedTensors AffineCouplingLayer::structure() const {
  return {{"in", index_tensor(in_)}, {"out", index_tensor(out_)}};
}

void AffineCouplingLayer::load_structure(const NamedTensors& s) {
  const Tensor* in = lookup(s, "in");
  const Tensor* out = lookup(s, "out");
  if (!in || !out || tensor_index(*in) != in_ || tensor_index(*out) != out_) {
    throw InputError("checkpoint coupling mask does not match the configured flow");
  }
}

FixedPermutationLayer::FixedPermutationLayer(Index permutation)
    : perm_(std::move(permutation)), inverse_(perm_.size()) {
  Index sorted = perm_;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    if (sorted[i] != i) throw InputError("not a permutation");
  }
  for (std::size_t i = 0; i < perm_.size(); ++i) inverse_[perm_[i]] = i;
}

FixedPermutationLayer FixedPermutationLayer::seeded(std::size_t dim, std::uint64_t seed) {
  Index perm = range(0, dim);
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  return FixedPermutationLayer(std::move(perm));
}

std::pair<Var, Var> FixedPermutationLayer::forward(const Var& x) const {
  return {ad::select_cols(x, perm_), ad::constant(Tensor({x.rows(), 1}))};
}

std::pair<Var, Var> FixedPermutationLayer::inverse(const Var& y) const {
  return {ad::select_cols(y, inverse_), ad::constant(Tensor({y.rows(), 1}))};
}

Dual FixedPermutationLayer::forward(const Dual& x) const {
  return ad::select_cols(x, perm_);
}

NamedTensors FixedPermutationLayer::structure() const {
  return {{"perm", index_tensor(perm_)}};
}

void FixedPermutationLayer::load_structure(const NamedTensors& s) {
  const Tensor* perm = lookup(s, "perm");
  if (!perm || perm->size() != perm_.size()) {
    throw InputError("checkpoint permutation missing or of wrong size");
  }
  *this = FixedPermutationLayer(tensor_index(*perm));
}

ElementwiseAffineLayer::ElementwiseAffineLayer(Var shift, Var log_scale)
    : shift_(std::move(shift)), log_scale_(std::move(log_scale)) {
  if (shift_.value().size() != log_scale_.value().size()) {
    throw InputError("elementwise affine shift/scale size mismatch");
  }
}

std::pair<Var, Var> ElementwiseAffineLayer::forward(const Var& x) const {
  Var y = ad::add(ad::mul(x, ad::exp(log_scale_)), shift_);
  Var log_det = ad::broadcast_to(ad::sum_cols(log_scale_), {x.rows(), 1});
  return {y, log_det};
}

std::pair<Var, Var> ElementwiseAffineLayer::inverse(const Var& y) const {
  Var x = ad::mul(ad::sub(y, shift_), ad::exp(ad::neg(log_scale_)));
  Var log_det = ad::broadcast_to(ad::neg(ad::sum_cols(log_scale_)), {y.rows(), 1});
  return {x, log_det};
}

Dual ElementwiseAffineLayer::forward(const Dual& x) const {
  return ad::add(ad::mul(x, ad::exp(log_scale_)), shift_);
}

SquareFlow::SquareFlow(std::size_t dim, std::string prefix)
    : dim_(dim), prefix_(std::move(prefix)) {
  if (dim_ == 0) throw InputError("flow dimension must be positive");
}

SquareFlow SquareFlow::realnvp(std::size_t dim, const RealNvpSpec& spec,
                               std::uint64_t seed, std::string prefix) {
  if (dim < 2) throw InputError("coupling flows need dimension >= 2");
  SquareFlow flow(dim, std::move(prefix));
  const std::size_t split = dim / 2;
  const Index first = range(0, split);
  const Index second = range(split, dim);
  std::mt19937_64 seeder(seed);
  // position -> original coordinate after all permutations so far
  Index accumulated = range(0, dim);
  for (std::size_t l = 0; l < spec.layers; ++l) {
    const bool even = l % 2 == 0;
    flow.add_coupling(even ? first : second, even ? second : first, spec.hidden, seeder());
    if (spec.permute && l + 1 < spec.layers) {
      Index perm = FixedPermutationLayer::seeded(dim, seeder()).permutation();
      Index next(dim);
      for (std::size_t i = 0; i < dim; ++i) next[i] = accumulated[perm[i]];
      accumulated = std::move(next);
      flow.add_permutation(std::move(perm));
    }
  }
  // Undo the accumulated reordering so an identity-initialized flow is the
  // identity map on coordinates, not a permutation.
  if (accumulated != range(0, dim)) {
    Index closing(dim);
    for (std::size_t i = 0; i < dim; ++i) closing[accumulated[i]] = i;
    flow.add_permutation(std::move(closing));
  }
  return flow;
}

SquareFlow SquareFlow::elementwise_affine(std::size_t dim, std::string prefix) {
  SquareFlow flow(dim, std::move(prefix));
  flow.add_elementwise_affine();
  return flow;
}

void SquareFlow::add_coupling(const Index& in_coords, const Index& out_coords,
                              const std::vector<std::size_t>& hidden,
                              std::uint64_t seed) {
  std::vector<std::size_t> widths{in_coords.size()};
  widths.insert(widths.end(), hidden.begin(), hidden.end());
  widths.push_back(2 * out_coords.size());
  const std::string name = prefix_ + "layer" + std::to_string(layers_.size()) + ".";
  ad::Sequential coupler = ad::make_mlp(params_, name, widths, seed, /*zero_last=*/true);
  layers_.push_back(std::make_unique<AffineCouplingLayer>(dim_, in_coords, out_coords,
                                                          std::move(coupler)));
}

void SquareFlow::add_permutation(Index permutation) {
  if (permutation.size() != dim_) throw InputError("permutation size mismatch");
  layers_.push_back(std::make_unique<FixedPermutationLayer>(std::move(permutation)));
}

void SquareFlow::add_elementwise_affine() {
  const std::string name = prefix_ + "layer" + std::to_string(layers_.size()) + ".";
  Var shift = params_.add(name + "shift", Tensor({1, dim_}));
  Var log_scale = params_.add(name + "log_scale", Tensor({1, dim_}));
  layers_.push_back(std::make_unique<ElementwiseAffineLayer>(shift, log_scale));
}

std::pair<Var, Var> SquareFlow::forward(const Var& z) const {
  if (z.cols() != dim_) {
    throw InputError("flow input has " + std::to_string(z.cols()) +
                     " columns, expected " + std::to_string(dim_));
  }
  Var h = z;
  Var log_det = ad::constant(Tensor({z.rows(), 1}));
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    auto [y, ld] = layers_[i]->forward(h);
    check_layer(y, i);
    h = y;
    log_det = ad::add(log_det, ld);
  }
  return {h, log_det};
}

std::pair<Var, Var> SquareFlow::inverse(const Var& x) const {
  if (x.cols() != dim_) {
    throw InputError("flow input has " + std::to_string(x.cols()) +
                     " columns, expected " + std::to_string(dim_));
  }
  Var h = x;
  Var log_det = ad::constant(Tensor({x.rows(), 1}));
  for (std::size_t i = layers_.size(); i-- > 0;) {
    auto [z, ld] = layers_[i]->inverse(h);
    check_layer(z, i);
    h = z;
    log_det = ad::add(log_det, ld);
  }
  return {h, log_det};
}

Dual SquareFlow::apply(const Dual& z) const {
  Dual h = z;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i]->forward(h);
    check_layer(h.primal, i);
    check_layer(h.tangent, i);
  }
  return h;
}

NamedTensors SquareFlow::structure() const {
  NamedTensors out;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const std::string name = prefix_ + "layer" + std::to_string(i) + ".";
    out.push_back({name + "type:" + layers_[i]->type_tag(), Tensor::scalar(static_cast<double>(i))});
    for (auto& [n, t] : layers_[i]->structure()) out.push_back({name + n, std::move(t)});
  }
  return out;
}

void SquareFlow::load_structure(const NamedTensors& s) {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const std::string name = prefix_ + "layer" + std::to_string(i) + ".";
    if (!lookup(s, name + "type:" + layers_[i]->type_tag())) {
      throw InputError("checkpoint layer " + std::to_string(i) + " type mismatch");
    }
    NamedTensors local;
    for (const auto& [n, t] : s) {
      if (n.rfind(name, 0) == 0) local.push_back({n.substr(name.size()), t});
    }
    layers_[i]->load_structure(local);
  }
}

Var StandardGaussian::log_prob(const Var& z) const {
  if (z.cols() != dim_) throw InputError("base density dimension mismatch");
  const double log_norm = -0.5 * static_cast<double>(dim_) * std::log(2.0 * std::numbers::pi);
  return ad::add_scalar(ad::scale(ad::sum_cols(ad::square(z)), -0.5), log_norm);
}

Tensor StandardGaussian::sample(std::size_t n, std::mt19937_64& rng) const {
  Tensor z({n, dim_});
  std::normal_distribution<double> dist(0.0, 1.0);
  for (auto& v : z.values()) v = dist(rng);
  return z;
}

std::pair<Tensor, Tensor> flow_forward(const SquareFlow& flow, const Tensor& z) {
  ad::NoGradGuard no_grad;
  auto [x, ld] = flow.forward(ad::constant(as_batch(z, flow.dim())));
  return {like_input(x.value(), z), z.rank() == 1 ? Tensor::scalar(ld.value()[0]) : ld.value()};
}

std::pair<Tensor, Tensor> flow_inverse(const SquareFlow& flow, const Tensor& x) {
  ad::NoGradGuard no_grad;
  auto [z, ld] = flow.inverse(ad::constant(as_batch(x, flow.dim())));
  return {like_input(z.value(), x), x.rank() == 1 ? Tensor::scalar(ld.value()[0]) : ld.value()};
}

Tensor square_log_prob(const SquareFlow& flow, const StandardGaussian& base,
                       const Tensor& x) {
  if (!x.all_finite()) throw InputError("square_log_prob: non-finite input");
  ad::NoGradGuard no_grad;
  auto [z, inv_ld] = flow.inverse(ad::constant(as_batch(x, flow.dim())));
  // log|det J_f(f^{-1}(x))| = -log|det J_{f^{-1}}(x)|
  Tensor lp = ad::add(base.log_prob(z), inv_ld).value();
  return x.rank() == 1 ? Tensor::scalar(lp[0]) : lp;
}

Tensor flow_sample(const SquareFlow& flow, const StandardGaussian& base,
                   std::size_t n, std::mt19937_64& rng) {
  if (n == 0) throw InputError("flow_sample needs n >= 1");
  ad::NoGradGuard no_grad;
  return flow.forward(ad::constant(base.sample(n, rng))).first.value();
}

}  // namespace rectflow::flows
