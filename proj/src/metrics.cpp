#include "rectflow/metrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>

#include "rectflow/errors.hpp"

namespace rectflow::metrics {

namespace {

Eigen::MatrixXd to_eigen(const Tensor& t) {
  Eigen::MatrixXd m(t.rows(), t.cols());
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) m(r, c) = t(r, c);
  return m;
}

constexpr double kEigenFloor = -1e-8;

// Eigenvalues of a symmetric matrix with tiny negatives clamped to zero.
Eigen::VectorXd clamped_eigenvalues(const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>& es,
                                    const char* what) {
  Eigen::VectorXd ev = es.eigenvalues();
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev(i) < kEigenFloor) {
      throw InputError(std::string(what) + " has eigenvalue " + std::to_string(ev(i)) +
                       " below the tolerance");
    }
    ev(i) = std::max(ev(i), 0.0);
  }
  return ev;
}

}  // namespace

Moments compute_moments(const Tensor& data) {
  if (data.rank() != 2) throw InputError("moments need a [n, r] matrix");
  const std::size_t n = data.rows();
  const std::size_t r = data.cols();
  if (n < 2) throw InputError("moments need at least two samples");
  Moments m{Tensor({r}), Tensor({r, r})};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < r; ++c) m.mean[c] += data(i, c);
  for (std::size_t c = 0; c < r; ++c) m.mean[c] /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t a = 0; a < r; ++a) {
      const double da = data(i, a) - m.mean[a];
      for (std::size_t b = a; b < r; ++b) m.cov(a, b) += da * (data(i, b) - m.mean[b]);
    }
  }
  for (std::size_t a = 0; a < r; ++a) {
    for (std::size_t b = a; b < r; ++b) {
      m.cov(a, b) /= static_cast<double>(n - 1);
      m.cov(b, a) = m.cov(a, b);
    }
  }
  return m;
}

double w2_gaussians(const Moments& a, const Moments& b) {
  const std::size_t r = a.mean.size();
  if (b.mean.size() != r || a.cov.size() != r * r || b.cov.size() != r * r) {
    throw InputError("moment dimensions differ");
  }
  double mean_term = 0.0;
  for (std::size_t i = 0; i < r; ++i) mean_term += (a.mean[i] - b.mean[i]) * (a.mean[i] - b.mean[i]);

  const Eigen::MatrixXd s1 = to_eigen(a.cov);
  const Eigen::MatrixXd s2 = to_eigen(b.cov);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es2(s2);
  const Eigen::VectorXd ev2 = clamped_eigenvalues(es2, "second covariance");
  clamped_eigenvalues(Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(s1, Eigen::EigenvaluesOnly),
                      "first covariance");
  const Eigen::MatrixXd root2 =
      es2.eigenvectors() * ev2.cwiseSqrt().asDiagonal() * es2.eigenvectors().transpose();
  Eigen::MatrixXd inner = root2 * s1 * root2;
  inner = 0.5 * (inner + inner.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> esi(inner, Eigen::EigenvaluesOnly);
  const double cross = clamped_eigenvalues(esi, "covariance product").cwiseSqrt().sum();
  return mean_term + s1.trace() + s2.trace() - 2.0 * cross;
}

double fid_like(const Tensor& real, const Tensor& generated) {
  return w2_gaussians(compute_moments(real), compute_moments(generated));
}

StumpResult stump_accuracy(const std::vector<double>& ll_in, const std::vector<double>& ll_out) {
  if (ll_in.empty() || ll_out.empty()) throw InputError("stump needs both sets nonempty");
  std::vector<std::pair<double, bool>> all;
  all.reserve(ll_in.size() + ll_out.size());
  for (double v : ll_in) all.push_back({v, true});
  for (double v : ll_out) all.push_back({v, false});
  std::sort(all.begin(), all.end());
  const double n_in = static_cast<double>(ll_in.size());
  const double n_out = static_cast<double>(ll_out.size());

  // Threshold t at a distinct value v: everything >= v is called "in".
  StumpResult best{all.front().first, 0.5};
  std::size_t in_below = 0;
  std::size_t out_below = 0;
  for (std::size_t i = 0; i < all.size();) {
    const double v = all[i].first;
    const double tpr = (n_in - static_cast<double>(in_below)) / n_in;
    const double tnr = static_cast<double>(out_below) / n_out;
    const double acc = 0.5 * (tpr + tnr);
    if (acc > best.accuracy) best = {v, acc};
    for (; i < all.size() && all[i].first == v; ++i) (all[i].second ? in_below : out_below)++;
  }
  return best;
}

Evaluation eval_log_likelihoods(const rect::RectangularFlow& rf, const Tensor& data,
                                double jitter, std::size_t batch) {
  if (data.rank() != 2 || data.cols() != rf.high_dim()) {
    throw InputError("evaluation data does not have D columns");
  }
  if (batch == 0) batch = 1;
  Evaluation out;
  const Tensor recon = rect::reconstruction_error(rf, data);
  out.reconstruction.assign(recon.values().begin(), recon.values().end());
  const std::size_t n = data.rows();
  const std::size_t D = data.cols();
  for (std::size_t start = 0; start < n; start += batch) {
    const std::size_t stop = std::min(n, start + batch);
    Tensor chunk({stop - start, D});
    std::copy(data.data() + start * D, data.data() + stop * D, chunk.data());
    try {
      const Tensor ll = rect::rect_log_density(rf, chunk, jitter);
      for (std::size_t i = 0; i < ll.size(); ++i) {
        out.log_likelihood.push_back(ll[i]);
        out.evaluated.push_back(start + i);
      }
    } catch (const ConditioningError&) {
      for (std::size_t i = 0; i < chunk.rows(); ++i) {
        try {
          out.log_likelihood.push_back(rect::rect_log_density(rf, chunk.row(i), jitter).item());
          out.evaluated.push_back(start + i);
        } catch (const ConditioningError&) {
          ++out.excluded;
        }
      }
    }
  }
  return out;
}

Histogram histogram(const std::vector<double>& values, std::size_t bins, double lo, double hi) {
  if (bins == 0) throw InputError("histogram needs at least one bin");
  if (!(hi > lo)) {
    lo -= 0.5;
    hi += 0.5;
  }
  Histogram h;
  h.counts.assign(bins, 0);
  for (std::size_t i = 0; i <= bins; ++i) h.edges.push_back(lo + (hi - lo) * i / bins);
  for (double v : values) {
    if (!std::isfinite(v) || v < lo || v > hi) continue;
    auto b = static_cast<std::size_t>((v - lo) / (hi - lo) * bins);
    h.counts[std::min(b, bins - 1)]++;
  }
  return h;
}

std::pair<Histogram, Histogram> joint_histograms(const std::vector<double>& a,
                                                 const std::vector<double>& b,
                                                 std::size_t bins) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (const auto* v : {&a, &b}) {
    for (double x : *v) {
      if (!std::isfinite(x)) continue;
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
  }
  if (!std::isfinite(lo)) lo = hi = 0.0;
  return {histogram(a, bins, lo, hi), histogram(b, bins, lo, hi)};
}

}  // namespace rectflow::metrics
