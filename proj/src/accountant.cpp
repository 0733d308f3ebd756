#include "eqdp/accountant.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace eqdp {

namespace {

double log_binomial(int n, int k) {
  return std::lgamma(double(n) + 1.0) - std::lgamma(double(k) + 1.0) -
         std::lgamma(double(n - k) + 1.0);
}

// log(sum(exp(x_i))) without overflow
double log_sum_exp(const std::vector<double>& xs) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : xs) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double acc = 0.0;
  for (double x : xs) acc += std::exp(x - m);
  return m + std::log(acc);
}

// binomial-expansion bound at an integer order:
// rho(a) = log( sum_j C(a,j) (1-q)^(a-j) q^j exp(j(j-1)/(2 sigma^2)) ) / (a-1)
double rdp_subsampled_integer(double q, double sigma, int alpha) {
  std::vector<double> terms(size_t(alpha) + 1);
  const double lq = std::log(q), l1q = std::log1p(-q);
  for (int j = 0; j <= alpha; ++j)
    terms[size_t(j)] = log_binomial(alpha, j) + double(alpha - j) * l1q + double(j) * lq +
                       double(j) * double(j - 1) / (2.0 * sigma * sigma);
  return log_sum_exp(terms) / double(alpha - 1);
}

}  // namespace

double rdp_gaussian(double sigma, double alpha) {
  require(sigma > 0.0, "noise multiplier must be positive");
  require(alpha > 1.0, "Renyi order must exceed 1");
  return alpha / (2.0 * sigma * sigma);
}

double rdp_subsampled_gaussian(double q, double sigma, double alpha) {
  if (!(q > 0.0) || q > 1.0) throw InvalidRate("sampling rate must lie in (0, 1]");
  require(sigma > 0.0, "noise multiplier must be positive");
  require(alpha > 1.0, "Renyi order must exceed 1");
  if (q == 1.0) return rdp_gaussian(sigma, alpha);
  const double floor_a = std::floor(alpha);
  if (alpha < 2.0) return rdp_subsampled_integer(q, sigma, 2);
  if (alpha == floor_a) return rdp_subsampled_integer(q, sigma, int(alpha));
  const double lo = rdp_subsampled_integer(q, sigma, int(floor_a));
  const double hi = rdp_subsampled_integer(q, sigma, int(floor_a) + 1);
  return lo + (alpha - floor_a) * (hi - lo);
}

std::vector<double> default_order_grid() {
  std::vector<double> orders = {1.25, 1.5, 1.75};
  for (double a = 2.0; a <= 64.0; a += 0.5) orders.push_back(a);
  for (int a = 65; a <= 256; ++a) orders.push_back(double(a));
  return orders;
}

Accountant::Accountant(std::vector<double> orders, double q, double sigma)
    : orders_(std::move(orders)), q_(q), sigma_(sigma) {
  if (orders_.empty()) throw EmptyOrderGrid("accountant order grid is empty");
  for (double a : orders_) require(a > 1.0, "Renyi orders must exceed 1");
  rho_step_.reserve(orders_.size());
  for (double a : orders_) rho_step_.push_back(rdp_subsampled_gaussian(q_, sigma_, a));
  rho_.assign(orders_.size(), 0.0);
}

void Accountant::account_steps(std::int64_t t) {
  require(t >= 0, "step count must be non-negative");
  for (size_t i = 0; i < orders_.size(); ++i) rho_[i] += double(t) * rho_step_[i];
  steps_ += t;
}

double rdp_to_epsilon(double rho, double order, double delta, RdpConversion conversion) {
  require(delta > 0.0 && delta < 1.0, "delta must lie in (0, 1)");
  if (conversion == RdpConversion::classic)
    return rho + std::log(1.0 / delta) / (order - 1.0);
  return rho + std::log((order - 1.0) / order) -
         (std::log(delta) + std::log(order)) / (order - 1.0);
}

EpsilonReport Accountant::to_epsilon(double delta, RdpConversion conversion) const {
  require(delta > 0.0 && delta < 1.0, "delta must lie in (0, 1)");
  EpsilonReport best{std::numeric_limits<double>::infinity(), 0.0};
  for (size_t i = 0; i < orders_.size(); ++i) {
    const double eps = rdp_to_epsilon(rho_[i], orders_[i], delta, conversion);
    if (eps < best.epsilon) best = {eps, orders_[i]};
  }
  best.epsilon = std::max(best.epsilon, 0.0);
  return best;
}

double calibrate_sigma(double target_eps, double delta, double q, std::int64_t steps,
                       RdpConversion conversion, double tol) {
  require(target_eps > 0.0, "target epsilon must be positive");
  require(steps > 0, "calibration needs at least one step");
  auto eps_of = [&](double sigma) {
    Accountant acc(q, sigma);
    acc.account_steps(steps);
    return acc.to_epsilon(delta, conversion).epsilon;
  };
  double lo = 1e-2, hi = 1.0;
  while (eps_of(hi) > target_eps) {
    hi *= 2.0;
    require(hi < 1e7, "calibration bracket exceeded");
  }
  // epsilon is decreasing in sigma: lo keeps eps >= target, hi keeps eps <= target
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double eps = eps_of(mid);
    if (std::abs(eps - target_eps) < tol) return mid;
    (eps > target_eps ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace eqdp
