#pragma once

#include <vector>

#include "h3m/tensor.hpp"

namespace h3m::numerics {

// Slices with population std below this are treated as constant and map
// to zeros under zscore.
inline constexpr double kDegenerateStd = 1e-8;
// Probability clamp applied before logs in cross-entropy.
inline constexpr double kProbClamp = 1e-7;

// Softmax along `axis`; any rank. Shift-invariant, each slice sums to 1.
Tensor softmax(const Tensor& x, std::size_t axis);

// Z-score along `axis` with population std; degenerate slices map to zeros.
Tensor zscore(const Tensor& x, std::size_t axis);

// KL(p||q) in nats with 0*ln(0/.) = 0. Validates that both inputs are
// distributions (nonnegative, sums within 1e-6 of 1) and throws if q has
// zero mass where p does not.
double kl_div(const std::vector<double>& p, const std::vector<double>& q);

// Jensen-Shannon divergence in nats, bounded by ln 2.
double jsd(const std::vector<double>& p, const std::vector<double>& q);

// JSD between two columns of a column-stochastic matrix (no distribution
// re-validation; used by the hyperedge weighting inner loop).
double jsd_columns(const Tensor& h, std::size_t col_a, std::size_t col_b);

}  // namespace h3m::numerics
