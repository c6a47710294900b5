#pragma once

// Post-horizon loss of a performing loan and its distribution over simulated
// horizon scenarios. Default and collateral are independent, so the loss of
// a loan from initial rating r is
//
//   L = sum_{k>h} s delta_k EPD(k) + c_pc delta_n EPD(n)
//       - sum_{k>h} delta_k (EPD(k) - EPD(k-1)) (1 - ELGD(k)),
//
// with the expected PD and LGD conditioned on the state at the horizon. The
// coefficient c_pc is 1 under `strict_pc_term`, otherwise the principal.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <span>
#include <variant>
#include <vector>

#include "bayesgrid/grid.hpp"
#include "bayesgrid/lgd.hpp"
#include "bayesgrid/parallel.hpp"
#include "bayesgrid/transition.hpp"

namespace bayesgrid {

struct LoanSpec {
  int maturity = 30;
  int horizon = 1;
  /// Coupon per period; negative selects 1 / maturity.
  double coupon = -1.0;
  double principal = 0.0;
  bool strict_pc_term = true;
  /// Empty means EAD_k = 1 for all k.
  std::vector<double> ead_schedule;
  /// Empty means delta_k = 1 for all k; otherwise entries for k = 1..n.
  std::vector<double> discount;
  double ltv0 = 1.0;

  double coupon_rate() const { return coupon < 0.0 ? 1.0 / maturity : coupon; }
  double discount_factor(int k) const { return discount.empty() ? 1.0 : discount.at(k - 1); }

  LgdContext lgd_context() const {
    if (ead_schedule.empty()) return LgdContext::unit_bullet(ltv0, maturity);
    return {ltv0, ead_schedule};
  }

  void validate() const {
    require(horizon >= 1 && maturity > horizon, "loan maturity must exceed the horizon, which must be >= 1");
    require(coupon_rate() >= 0.0, "coupon must be nonnegative");
    require(ltv0 > 0.0, "initial LTV must be positive");
    require(ead_schedule.empty() || static_cast<int>(ead_schedule.size()) == maturity + 1,
            "EAD schedule must list EAD_0..EAD_n");
    require(discount.empty() || static_cast<int>(discount.size()) == maturity, "discount factors must list k = 1..n");
    for (double d : discount) require(d > 0.0 && d <= 1.0, "discount factors must lie in (0, 1]");
  }
};

/// `epd[k-1]` = EPD(k) and `elgd[k-1]` = ELGD(k), k = 1..n. Entries before
/// the horizon are only read for the first increment.
inline double loan_loss(const LoanSpec& loan, std::span<const double> epd, std::span<const double> elgd) {
  loan.validate();
  const int n = loan.maturity;
  const int h = loan.horizon;
  require(static_cast<int>(epd.size()) >= n && static_cast<int>(elgd.size()) >= n,
          "EPD and ELGD curves must cover periods 1..n");
  for (int k = h + 1; k <= n; ++k)
    if (epd[k - 1] < epd[k - 2]) throw DomainError("expected cumulative PD curve is not monotone");
  const double s = loan.coupon_rate();
  const double pc = loan.strict_pc_term ? 1.0 : loan.principal;
  double coupons = 0.0, recoveries = 0.0;
  for (int k = h + 1; k <= n; ++k) {
    const double delta = loan.discount_factor(k);
    coupons += s * delta * epd[k - 1];
    recoveries += delta * (epd[k - 1] - epd[k - 2]) * (1.0 - elgd[k - 1]);
  }
  return coupons + pc * loan.discount_factor(n) * epd[n - 1] - recoveries;
}

/// ELGD(k) for k = 1..n given the collateral state at the horizon; entries
/// k <= h are zero. `log_level` is log(c_h / c_0), `last_return` is lc_h.
inline std::vector<double> conditional_elgd_curve(const LoanSpec& loan, const CollateralParams& collateral,
                                                  double log_level, double last_return) {
  const LgdContext ctx = loan.lgd_context();
  CollateralParams at_horizon = collateral;
  at_horizon.initial_log_return = last_return;
  std::vector<double> out(loan.maturity, 0.0);
  for (int k = loan.horizon + 1; k <= loan.maturity; ++k)
    out[k - 1] = elgd_closed_form(at_horizon, ctx.strike(k) * std::exp(log_level), k - loan.horizon);
  return out;
}

/// EPD curves queried from a trained grid after projecting each scenario.
struct GridEpdSource {
  const ValuationGrid* grid;
  LowMethod method;
};
/// EPD curves estimated per scenario by direct Monte Carlo under the high model.
struct DirectEpdSource {
  int n_paths = 1000;
};
using EpdSource = std::variant<GridEpdSource, DirectEpdSource>;

struct ScenarioSettings {
  /// Law of x_0 for the simulated scenarios (stationary for TtC).
  FactorStart start = StationaryDraw{};
  std::uint64_t seed = 0;
  int threads = 1;
};

struct LossDistribution {
  /// Performing initial ratings, 0-based.
  std::vector<int> ratings;
  /// losses[r][scenario]
  std::vector<std::vector<double>> losses;

  std::size_t scenarios() const { return losses.empty() ? 0 : losses.front().size(); }
};

/// Scenario i draws factors from (seed, kScenario, i), collateral from
/// (seed, kCollateral, i) and direct EPD paths from (seed, kBenchmark, i), so
/// the same scenarios are seen by every EPD source.
inline LossDistribution build_loss_distribution(const LoanSpec& loan, const EpdSource& source,
                                                const TransitionModelParams& high, const CollateralParams& collateral,
                                                int n_scenarios, const ScenarioSettings& settings = {}) {
  loan.validate();
  collateral.validate();
  require(n_scenarios >= 1, "at least one scenario is required");
  const int h = loan.horizon;
  const int perf = high.default_rating();
  if (const auto* g = std::get_if<GridEpdSource>(&source)) {
    require(g->grid != nullptr, "grid source needs a grid");
    require(g->grid->maturity >= loan.maturity, "grid term structure is shorter than the loan");
    require(g->grid->low_dim == low_dimension(g->method), "grid was trained with a different projection");
  }

  LossDistribution dist;
  for (int r = 0; r < perf; ++r) dist.ratings.push_back(r);
  dist.losses.assign(perf, std::vector<double>(n_scenarios, 0.0));

  parallel_for(static_cast<std::size_t>(n_scenarios), settings.threads, [&](std::size_t i) {
    RngStream factor_rng(settings.seed, StreamTag::kScenario, i);
    const FactorPath path = simulate_factors(high, h + 1, settings.start, factor_rng);

    RngStream collateral_rng(settings.seed, StreamTag::kCollateral, i);
    std::vector<double> levels;
    simulate_collateral_log_levels(collateral, h, collateral_rng, levels);
    // lc_h from the level increments.
    const double last_return = h >= 2 ? levels[h - 1] - levels[h - 2] : levels[0];
    const auto elgd = conditional_elgd_curve(loan, collateral, levels[h - 1], last_return);

    Matrix curves;
    if (const auto* g = std::get_if<GridEpdSource>(&source)) {
      const Vector coords = project_path(g->method, path, h);
      curves.resize(perf, loan.maturity);
      for (int r = 0; r < perf; ++r) {
        const auto q = query_grid(*g->grid, coords, r);
        for (int k = 0; k < loan.maturity; ++k) curves(r, k) = q[k];
      }
    } else {
      RngStream mc_rng(settings.seed, StreamTag::kBenchmark, i);
      curves = expected_pd_curves(high, path.values[h], loan.maturity,
                                  std::get<DirectEpdSource>(source).n_paths, mc_rng);
    }
    std::vector<double> epd(loan.maturity);
    for (int r = 0; r < perf; ++r) {
      for (int k = 0; k < loan.maturity; ++k) epd[k] = curves(r, k);
      dist.losses[r][i] = loan_loss(loan, epd, elgd);
    }
  });
  return dist;
}

struct RatingMetrics {
  int rating = 0;
  double expected_loss = 0.0;
  /// (level, VaR) in the order requested.
  std::vector<std::pair<double, double>> var;

  double var_at(double level) const {
    for (auto [q, v] : var)
      if (q == level) return v;
    throw ContractViolation("quantile level was not computed");
  }
};

/// Lower empirical quantile: the ceil(q N)-th order statistic (1-based).
inline double empirical_quantile(std::vector<double> losses, double level) {
  require(!losses.empty(), "empty loss distribution");
  require(level > 0.0 && level < 1.0, "quantile level must lie in (0, 1)");
  const auto n = static_cast<double>(losses.size());
  const auto rank = static_cast<std::size_t>(std::max(1.0, std::ceil(level * n - 1e-9)));
  std::nth_element(losses.begin(), losses.begin() + (rank - 1), losses.end());
  return losses[rank - 1];
}

inline std::vector<RatingMetrics> risk_metrics(const LossDistribution& dist, const std::vector<double>& levels) {
  require(dist.scenarios() > 0, "empty loss distribution");
  if (!levels.empty()) {
    const double top = *std::max_element(levels.begin(), levels.end());
    if (static_cast<double>(dist.scenarios()) < 10.0 / (1.0 - top))
      std::cerr << "warning: " << dist.scenarios() << " scenarios give thin support for the " << top
                << " quantile\n";
  }
  std::vector<RatingMetrics> out;
  for (std::size_t r = 0; r < dist.ratings.size(); ++r) {
    const auto& losses = dist.losses[r];
    RatingMetrics m{dist.ratings[r], 0.0, {}};
    double sum = 0.0;
    for (double l : losses) {
      require(std::isfinite(l), "loss distribution has non-finite entries");
      sum += l;
    }
    m.expected_loss = sum / static_cast<double>(losses.size());
    for (double q : levels) m.var.emplace_back(q, empirical_quantile(losses, q));
    out.push_back(std::move(m));
  }
  return out;
}

}  // namespace bayesgrid
