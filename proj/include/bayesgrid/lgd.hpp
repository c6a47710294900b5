#pragma once

// Collateral-driven loss given default.
//
// Collateral log-returns follow lc_k = c + x lc_{k-1} + sigma z_k, so that
// log(c_t / c_0) ~ N(mu_t, Omega_t) given lc_0, and
// ELGD_t = E[(1 - K_t c_t / c_0)^+] has a Black-Scholes type closed form.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "bayesgrid/linalg.hpp"
#include "bayesgrid/rng.hpp"

namespace bayesgrid {

struct CollateralParams {
  double drift = 0.0;
  double ar_coeff = 0.73;
  double vol = 0.04;
  double initial_log_return = 0.0;

  void validate() const {
    require(std::abs(ar_coeff) < 1.0, "collateral AR coefficient must satisfy |x| < 1");
    require(vol >= 0.0, "collateral volatility must be nonnegative");
  }
};

/// Exposure schedule EAD_0..EAD_n with strike K_k = (1/LTV_0) (EAD_0 / EAD_k).
struct LgdContext {
  double ltv0 = 1.0;
  std::vector<double> ead_schedule;

  double strike(int k) const {
    require(ltv0 > 0.0, "initial LTV must be positive");
    require(k >= 0 && k < static_cast<int>(ead_schedule.size()), "strike period outside the EAD schedule");
    require(ead_schedule[k] > 0.0 && ead_schedule[0] > 0.0, "EAD schedule entries must be positive");
    return ead_schedule[0] / (ltv0 * ead_schedule[k]);
  }

  /// Unit bullet: EAD_k = 1 for k = 0..n.
  static LgdContext unit_bullet(double ltv0, int maturity) {
    return {ltv0, std::vector<double>(static_cast<std::size_t>(maturity) + 1, 1.0)};
  }

  /// Linear amortization: EAD_k = (n - k + 1) / (n + 1) for k = 0..n.
  static LgdContext linear_amortization(double ltv0, int maturity) {
    LgdContext ctx{ltv0, {}};
    for (int k = 0; k <= maturity; ++k)
      ctx.ead_schedule.push_back(static_cast<double>(maturity - k + 1) / (maturity + 1));
    return ctx;
  }
};

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

/// a_0 = 0, a_k = 1 + x a_{k-1}; returns a_1..a_T.
inline std::vector<double> a_sequence(double x, int periods) {
  require(periods >= 1, "a_sequence needs at least one period");
  std::vector<double> a;
  a.reserve(periods);
  double prev = 0.0;
  for (int k = 1; k <= periods; ++k) {
    prev = 1.0 + x * prev;
    a.push_back(prev);
  }
  return a;
}

struct LogMoments {
  double mean = 0.0;
  double variance = 0.0;
};

/// Mean and variance of log(c_t / c_0) given lc_0.
inline LogMoments collateral_log_moments(const CollateralParams& p, int t) {
  require(t >= 1, "collateral moments need t >= 1");
  const auto a = a_sequence(p.ar_coeff, t);
  double sum_a = 0.0, sum_a2 = 0.0;
  for (double ak : a) {
    sum_a += ak;
    sum_a2 += ak * ak;
  }
  return {p.drift * sum_a + a.back() * p.ar_coeff * p.initial_log_return, p.vol * p.vol * sum_a2};
}

/// E[(1 - K e^Z)^+] for Z ~ N(mean, variance).
inline double expected_shortfall_fraction(double strike, double mean, double variance) {
  require(strike > 0.0, "strike must be positive");
  if (variance <= 0.0) return std::max(0.0, 1.0 - strike * std::exp(mean));
  const double sd = std::sqrt(variance);
  const double log_k = std::log(strike);
  const double d1 = (log_k + mean + variance) / sd;
  const double d2 = (log_k + mean) / sd;
  const double value = normal_cdf(-d2) - strike * std::exp(mean + 0.5 * variance) * normal_cdf(-d1);
  return std::clamp(value, 0.0, 1.0);
}

inline double elgd_closed_form(const CollateralParams& p, double strike, int t) {
  const auto m = collateral_log_moments(p, t);
  return expected_shortfall_fraction(strike, m.mean, m.variance);
}

struct MonteCarloEstimate {
  double estimate = 0.0;
  double std_error = 0.0;
};

/// Simulated log(c_t/c_0) for t = 1..T along one AR(1) path.
inline void simulate_collateral_log_levels(const CollateralParams& p, int periods, RngStream& rng,
                                           std::vector<double>& out) {
  out.resize(periods);
  double lc = p.initial_log_return;
  double level = 0.0;
  for (int k = 0; k < periods; ++k) {
    lc = p.drift + p.ar_coeff * lc + p.vol * rng.normal();
    level += lc;
    out[k] = level;
  }
}

/// ELGD Monte Carlo estimates for every (strike, t) pair from one set of paths.
/// Result[s][t-1] is the estimate for strikes[s] at period t.
inline std::vector<std::vector<MonteCarloEstimate>> elgd_monte_carlo_grid(const CollateralParams& p,
                                                                          const std::vector<double>& strikes,
                                                                          int periods, long n_paths, RngStream& rng) {
  p.validate();
  require(n_paths >= 100, "ELGD Monte Carlo needs at least 100 paths");
  require(periods >= 1, "ELGD Monte Carlo needs at least one period");
  for (double k : strikes) require(k > 0.0, "strike must be positive");
  const std::size_t ns = strikes.size();
  // Welford accumulators per (strike, period).
  std::vector<double> mean(ns * periods, 0.0), m2(ns * periods, 0.0), levels;
  for (long path = 0; path < n_paths; ++path) {
    simulate_collateral_log_levels(p, periods, rng, levels);
    const double count = static_cast<double>(path + 1);
    for (int t = 0; t < periods; ++t) {
      const double ratio = std::exp(levels[t]);
      for (std::size_t s = 0; s < ns; ++s) {
        const double loss = std::max(0.0, 1.0 - strikes[s] * ratio);
        const std::size_t cell = s * periods + t;
        const double delta = loss - mean[cell];
        mean[cell] += delta / count;
        m2[cell] += delta * (loss - mean[cell]);
      }
    }
  }
  std::vector<std::vector<MonteCarloEstimate>> out(ns, std::vector<MonteCarloEstimate>(periods));
  const double n = static_cast<double>(n_paths);
  for (std::size_t s = 0; s < ns; ++s)
    for (int t = 0; t < periods; ++t) {
      const std::size_t cell = s * periods + t;
      out[s][t] = {mean[cell], std::sqrt(m2[cell] / (n - 1.0) / n)};
    }
  return out;
}

inline MonteCarloEstimate elgd_monte_carlo(const CollateralParams& p, double strike, int t, long n_paths,
                                           RngStream& rng) {
  return elgd_monte_carlo_grid(p, {strike}, t, n_paths, rng)[0][t - 1];
}

}  // namespace bayesgrid
