#pragma once

#include <cstddef>
#include <vector>

#include "rectflow/rectangular.hpp"
#include "rectflow/tensor.hpp"

namespace rectflow::metrics {

struct Moments {
  Tensor mean;  // [r]
  Tensor cov;   // [r, r], divisor n - 1
};

Moments compute_moments(const Tensor& data);

// Squared Wasserstein-2 distance between the Gaussians with these moments.
double w2_gaussians(const Moments& a, const Moments& b);

double fid_like(const Tensor& real, const Tensor& generated);

struct StumpResult {
  double threshold = 0.0;  // in-distribution iff log-likelihood >= threshold
  double accuracy = 0.5;   // balanced accuracy
};

// Threshold with the best balanced accuracy; among equally good thresholds
// the smallest observed score is returned.
StumpResult stump_accuracy(const std::vector<double>& ll_in, const std::vector<double>& ll_out);

struct Evaluation {
  std::vector<double> log_likelihood;  // evaluated rows only
  std::vector<double> reconstruction;  // every row
  std::vector<std::size_t> evaluated;  // row index of each log-likelihood
  std::size_t excluded = 0;            // rows whose log det failed
};

// Exact-path log-likelihoods and reconstruction errors, in batches. Rows whose
// Gram matrix cannot be factorized are excluded and counted.
Evaluation eval_log_likelihoods(const rect::RectangularFlow& rf, const Tensor& data,
                                double jitter = 0.0, std::size_t batch = 1000);

struct Histogram {
  std::vector<double> edges;  // bins + 1
  std::vector<std::size_t> counts;
};

Histogram histogram(const std::vector<double>& values, std::size_t bins, double lo, double hi);
// Bins spanning the joint range of both sets.
std::pair<Histogram, Histogram> joint_histograms(const std::vector<double>& a,
                                                 const std::vector<double>& b,
                                                 std::size_t bins);

}  // namespace rectflow::metrics
