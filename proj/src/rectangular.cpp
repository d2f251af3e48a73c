#include "rectflow/rectangular.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "rectflow/errors.hpp"
#include "rectflow/estimators.hpp"

namespace rectflow::rect {

namespace {

Tensor as_rows(const Tensor& t, std::size_t dim, const char* what) {
  if (t.rank() == 1 && t.size() == dim) return t.reshaped({1, dim});
  if (t.rank() == 2 && t.cols() == dim) return t;
  throw InputError(std::string(what) + " shape " + shape_string(t.shape()) +
                   " does not match dimension " + std::to_string(dim));
}

Tensor like_input(const Tensor& out, const Tensor& input) {
  if (input.rank() == 1) return out.reshaped({out.size()});
  return out;
}

// [batch, 1] -> scalar for single-point input, [batch] otherwise.
Tensor per_point(const Tensor& col, const Tensor& input) {
  if (input.rank() == 1) return Tensor::scalar(col[0]);
  return col.reshaped({col.size()});
}

}  // namespace

PadSpec::PadSpec(std::size_t d, std::size_t D, Index embed)
    : d_(d), D_(D), embed_(std::move(embed)) {
  if (d_ == 0 || d_ > D_) throw InputError("padding needs 1 <= d <= D");
  if (embed_.size() != d_) throw InputError("embedding index count must equal d");
  Index sorted = embed_;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end() || sorted.back() >= D_) {
    throw InputError("embedding positions must be distinct and below D");
  }
}

PadSpec PadSpec::identity(std::size_t d, std::size_t D) {
  Index embed(d);
  std::iota(embed.begin(), embed.end(), 0);
  return PadSpec(d, D, std::move(embed));
}

PadSpec PadSpec::seeded(std::size_t d, std::size_t D, std::uint64_t seed) {
  if (d == 0 || d > D) throw InputError("padding needs 1 <= d <= D");
  Index perm(D);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  perm.resize(d);
  return PadSpec(d, D, std::move(perm));
}

Index PadSpec::dropped() const {
  Index out;
  for (std::size_t i = 0; i < D_; ++i) {
    if (std::find(embed_.begin(), embed_.end(), i) == embed_.end()) out.push_back(i);
  }
  return out;
}

Var PadSpec::pad(const Var& z) const {
  if (z.cols() != d_) throw InputError("pad: input does not have d columns");
  return ad::scatter_cols(z, embed_, D_);
}

Dual PadSpec::pad(const Dual& z) const {
  if (z.primal.cols() != d_) throw InputError("pad: input does not have d columns");
  return ad::scatter_cols(z, embed_, D_);
}

Var PadSpec::unpad(const Var& x) const {
  if (x.cols() != D_) throw InputError("unpad: input does not have D columns");
  return ad::select_cols(x, embed_);
}

Tensor PadSpec::pad(const Tensor& z) const {
  ad::NoGradGuard no_grad;
  return like_input(pad(ad::constant(as_rows(z, d_, "pad input"))).value(), z);
}

Tensor PadSpec::unpad(const Tensor& x) const {
  ad::NoGradGuard no_grad;
  return like_input(unpad(ad::constant(as_rows(x, D_, "unpad input"))).value(), x);
}

Tensor PadSpec::matrix() const {
  Tensor m({D_, d_});
  for (std::size_t i = 0; i < d_; ++i) m(embed_[i], i) = 1.0;
  return m;
}

Var EmbeddingMap::apply(const Var& z) const { return high_->forward(pad_.pad(z)).first; }

Dual EmbeddingMap::apply(const Dual& z) const { return high_->apply(pad_.pad(z)); }

RectangularFlow::RectangularFlow(SquareFlow high, PadSpec pad, SquareFlow low)
    : high_(std::make_shared<SquareFlow>(std::move(high))),
      low_(std::make_shared<SquareFlow>(std::move(low))),
      pad_(std::move(pad)),
      base_(pad_.low_dim()) {
  if (high_->dim() != pad_.high_dim() || low_->dim() != pad_.low_dim()) {
    throw InputError("flow dimensions do not match the padding");
  }
  embedding_ = std::make_shared<EmbeddingMap>(high_, pad_);
  params_.extend(high_->params());
  params_.extend(low_->params());
}

RectangularFlow RectangularFlow::build(const RectSpec& spec, std::uint64_t seed) {
  std::mt19937_64 seeder(seed);
  SquareFlow high = SquareFlow::realnvp(spec.D, spec.high, seeder(), "high.");
  PadSpec pad = spec.identity_pad ? PadSpec::identity(spec.d, spec.D)
                                  : PadSpec::seeded(spec.d, spec.D, seeder());
  const std::uint64_t low_seed = seeder();
  SquareFlow low(spec.d, "low.");
  switch (spec.low.kind) {
    case LowFlowSpec::Kind::None:
      break;
    case LowFlowSpec::Kind::Affine:
      low = SquareFlow::elementwise_affine(spec.d, "low.");
      break;
    case LowFlowSpec::Kind::RealNvp:
      low = SquareFlow::realnvp(spec.d, spec.low.realnvp, low_seed, "low.");
      break;
  }
  return RectangularFlow(std::move(high), std::move(pad), std::move(low));
}

Var RectangularFlow::f(const Var& z) const { return embedding_->apply(z); }

Var RectangularFlow::f_dagger(const Var& x) const {
  return pad_.unpad(high_->inverse(x).first);
}

Var RectangularFlow::g(const Var& u) const { return f(low_->forward(u).first); }

Var RectangularFlow::g_dagger(const Var& x) const {
  return low_->inverse(f_dagger(x)).first;
}

Var RectangularFlow::reconstruction_error(const Var& x) const {
  return ad::sum_cols(ad::square(ad::sub(x, f(f_dagger(x)))));
}

flows::NamedTensors RectangularFlow::structure() const {
  std::vector<double> embed(pad_.embed().begin(), pad_.embed().end());
  flows::NamedTensors out{{"pad.dims", Tensor::vector({static_cast<double>(pad_.low_dim()),
                                                        static_cast<double>(pad_.high_dim())})},
                          {"pad.embed", Tensor::vector(std::move(embed))}};
  for (auto& e : high_->structure()) out.push_back(std::move(e));
  for (auto& e : low_->structure()) out.push_back(std::move(e));
  return out;
}

void RectangularFlow::load_structure(const flows::NamedTensors& s) {
  const Tensor* embed = nullptr;
  for (const auto& [n, t] : s) {
    if (n == "pad.embed") embed = &t;
  }
  if (!embed || embed->size() != pad_.low_dim()) {
    throw InputError("checkpoint padding missing or of wrong size");
  }
  Index idx;
  for (double v : embed->values()) idx.push_back(static_cast<std::size_t>(v));
  pad_ = PadSpec(pad_.low_dim(), pad_.high_dim(), std::move(idx));
  embedding_ = std::make_shared<EmbeddingMap>(high_, pad_);
  high_->load_structure(s);
  low_->load_structure(s);
}

Tensor g_forward(const RectangularFlow& rf, const Tensor& z) {
  ad::NoGradGuard no_grad;
  return like_input(rf.g(ad::constant(as_rows(z, rf.low_dim(), "latent"))).value(), z);
}

Tensor g_left_inverse(const RectangularFlow& rf, const Tensor& x) {
  ad::NoGradGuard no_grad;
  return like_input(rf.g_dagger(ad::constant(as_rows(x, rf.high_dim(), "data"))).value(), x);
}

Tensor project(const RectangularFlow& rf, const Tensor& x) {
  ad::NoGradGuard no_grad;
  Var xv = ad::constant(as_rows(x, rf.high_dim(), "data"));
  return like_input(rf.f(rf.f_dagger(xv)).value(), x);
}

Tensor reconstruction_error(const RectangularFlow& rf, const Tensor& x) {
  ad::NoGradGuard no_grad;
  Var err = rf.reconstruction_error(ad::constant(as_rows(x, rf.high_dim(), "data")));
  return per_point(err.value(), x);
}

DensityTerms density_terms(const RectangularFlow& rf, const Var& x, double jitter) {
  if (x.cols() != rf.high_dim()) throw InputError("data point does not have D columns");
  DensityTerms t;
  Var z = rf.f_dagger(x);
  auto [u, low_ld] = rf.low().inverse(z);
  t.base_log_prob = rf.base().log_prob(u);
  t.low_logdet = low_ld;
  t.half_logdet = ad::scale(est::logdet_jtj_var(rf.embedding(), z, jitter), 0.5);
  t.log_density = ad::sub(ad::add(t.base_log_prob, t.low_logdet), t.half_logdet);
  return t;
}

Tensor rect_log_density(const RectangularFlow& rf, const Tensor& x, double jitter) {
  ad::NoGradGuard no_grad;
  DensityTerms t =
      density_terms(rf, ad::constant(as_rows(x, rf.high_dim(), "data")), jitter);
  return per_point(t.log_density.value(), x);
}

Tensor speed_profile(const RectangularFlow& rf, const Tensor& grid) {
  if (rf.low_dim() != 1) throw UnsupportedError("speed profile needs a one-dimensional latent space");
  Tensor g = grid.rank() == 1 ? grid.reshaped({grid.size(), 1}) : as_rows(grid, 1, "grid");
  if (g.rows() < 2) throw InputError("speed profile needs at least two grid points");
  ad::NoGradGuard no_grad;
  const Tensor image = rf.f(ad::constant(g)).value();
  Tensor out({g.rows() - 1});
  for (std::size_t i = 0; i + 1 < g.rows(); ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < image.cols(); ++c) {
      const double diff = image(i + 1, c) - image(i, c);
      s += diff * diff;
    }
    out[i] = std::sqrt(s);
  }
  return out;
}

Tensor rect_sample(const RectangularFlow& rf, std::size_t n, std::mt19937_64& rng) {
  ad::NoGradGuard no_grad;
  return rf.g(ad::constant(rf.base().sample(n, rng))).value();
}

}  // namespace rectflow::rect
