#pragma once

#include <cstdint>
#include <vector>

#include "eqdp/common.hpp"

namespace eqdp {

/// Fraction of entries with magnitude strictly below the threshold.
double l0_eps_fraction(const std::vector<double>& values, double eps_threshold);

/// Mean over samples of the per-class-averaged squared error between the
/// predicted distribution and the one-hot label: for each sample,
/// sum_k (p_k - y_k)^2 / K, averaged over the batch. Rows must sum to 1
/// within 1e-6.
double brier_score(const std::vector<double>& probabilities, int num_classes,
                   const std::vector<int>& labels);

/// Fraction of samples whose argmax matches the label; ties resolve to the
/// lowest class index.
double top1_accuracy(const std::vector<double>& probabilities, int num_classes,
                     const std::vector<int>& labels);

/// One sparsity measurement along a training run.
struct SparsityRecord {
  std::int64_t step = 0;
  double param_fraction = 0.0;
  double grad_fraction = 0.0;
};

}  // namespace eqdp
