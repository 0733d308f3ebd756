#pragma once

#include <cstdint>
#include <vector>

#include "eqdp/common.hpp"

namespace eqdp {

/// Renyi divergence of order alpha between N(0, sigma^2) and N(1, sigma^2):
/// alpha / (2 sigma^2). Requires sigma > 0 and alpha > 1.
double rdp_gaussian(double sigma, double alpha);

/// Upper bound on the Renyi divergence of order alpha for the Poisson
/// subsampled Gaussian mechanism (sampling rate q, noise multiplier sigma).
/// Integer orders use the binomial-expansion bound; non-integer orders >= 2
/// interpolate linearly between the bracketing integers (the bound is convex
/// in alpha, so the chord lies above it); orders in (1, 2) use the order-2
/// value (the divergence is non-decreasing in alpha). q = 1 reduces to the
/// plain Gaussian expression for any order. Throws InvalidRate unless
/// 0 < q <= 1.
double rdp_subsampled_gaussian(double q, double sigma, double alpha);

/// How accumulated Renyi bounds convert to (epsilon, delta).
///   classic:  eps = rho(a) + ln(1/delta)/(a-1)
///   refined:  eps = rho(a) + ln((a-1)/a) - (ln(delta) + ln(a))/(a-1)
/// The refined form is strictly tighter and is the default.
enum class RdpConversion { classic, refined };

/// Standard order grid: {1.25, 1.5, 1.75} then 2 to 64 in steps of 0.5 and
/// the integers 65..256.
std::vector<double> default_order_grid();

/// Converts one accumulated Renyi bound rho at a single order to epsilon
/// under the chosen conversion. to_epsilon minimizes this over the grid.
double rdp_to_epsilon(double rho, double order, double delta,
                      RdpConversion conversion = RdpConversion::refined);

struct EpsilonReport {
  double epsilon = 0.0;
  double best_order = 0.0;
};

/// Accumulates per-order Renyi bounds for a fixed (q, sigma) mechanism under
/// additive composition.
class Accountant {
 public:
  Accountant(std::vector<double> orders, double q, double sigma);
  Accountant(double q, double sigma) : Accountant(default_order_grid(), q, sigma) {}

  /// Adds t steps of the mechanism: rho(a) += t * rho_step(a).
  void account_steps(std::int64_t t);

  /// min over orders of the conversion; reports the minimizing order.
  EpsilonReport to_epsilon(double delta, RdpConversion conversion = RdpConversion::refined) const;

  const std::vector<double>& orders() const { return orders_; }
  const std::vector<double>& rho() const { return rho_; }
  std::int64_t steps() const { return steps_; }
  double sample_rate() const { return q_; }
  double noise_multiplier() const { return sigma_; }

 private:
  std::vector<double> orders_, rho_step_, rho_;
  double q_ = 1.0, sigma_ = 1.0;
  std::int64_t steps_ = 0;
};

/// Binary search for the noise multiplier whose accumulated epsilon matches
/// target_eps at the given delta to within tol, exploiting that epsilon is
/// decreasing in sigma.
double calibrate_sigma(double target_eps, double delta, double q, std::int64_t steps,
                       RdpConversion conversion = RdpConversion::refined, double tol = 1e-3);

}  // namespace eqdp
