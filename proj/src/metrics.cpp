#include "eqdp/metrics.hpp"

#include <cmath>

namespace eqdp {

double l0_eps_fraction(const std::vector<double>& values, double eps_threshold) {
  require(eps_threshold >= 0.0, "threshold must be non-negative");
  require(!values.empty(), "cannot measure sparsity of an empty vector");
  std::int64_t count = 0;
  for (double v : values)
    if (std::abs(v) < eps_threshold) ++count;
  return double(count) / double(values.size());
}

namespace {

std::int64_t checked_batch(const std::vector<double>& probabilities, int num_classes,
                           const std::vector<int>& labels) {
  require(num_classes >= 1, "need at least one class");
  require(probabilities.size() == labels.size() * size_t(num_classes),
          "probability matrix does not match the label count");
  require(!labels.empty(), "empty batch");
  for (int y : labels) require(y >= 0 && y < num_classes, "label out of range");
  return std::int64_t(labels.size());
}

}  // namespace

double brier_score(const std::vector<double>& probabilities, int num_classes,
                   const std::vector<int>& labels) {
  const std::int64_t b = checked_batch(probabilities, num_classes, labels);
  double total = 0.0;
  for (std::int64_t i = 0; i < b; ++i) {
    const double* row = probabilities.data() + i * num_classes;
    double row_sum = 0.0, err = 0.0;
    for (int k = 0; k < num_classes; ++k) {
      row_sum += row[k];
      const double y = (k == labels[size_t(i)]) ? 1.0 : 0.0;
      err += (row[k] - y) * (row[k] - y);
    }
    require(std::abs(row_sum - 1.0) <= 1e-6, "probability row does not sum to 1");
    total += err / double(num_classes);
  }
  return total / double(b);
}

double top1_accuracy(const std::vector<double>& probabilities, int num_classes,
                     const std::vector<int>& labels) {
  const std::int64_t b = checked_batch(probabilities, num_classes, labels);
  std::int64_t hits = 0;
  for (std::int64_t i = 0; i < b; ++i) {
    const double* row = probabilities.data() + i * num_classes;
    int best = 0;
    for (int k = 1; k < num_classes; ++k)
      if (row[k] > row[best]) best = k;
    if (best == labels[size_t(i)]) ++hits;
  }
  return double(hits) / double(b);
}

}  // namespace eqdp
