#include <gtest/gtest.h>

#include <cmath>

#include "bayesgrid/grid.hpp"
#include "bayesgrid/reference_models.hpp"

using namespace bayesgrid;

namespace {

PcaBasis benchmark_pca(const TransitionModelParams& high, int components) {
  std::vector<FactorPath> sample;
  for (int i = 0; i < 2000; ++i) {
    RngStream rng(99, StreamTag::kPcaSample, i);
    FactorPath p = simulate_factors(high, 1, StationaryDraw{}, rng);
    p.values.resize(1);
    sample.push_back(std::move(p));
  }
  return pca_fit(sample, components);
}

ValuationGrid line_grid(const std::vector<double>& xs, const std::vector<std::vector<double>>& curves, int k) {
  ValuationGrid g;
  g.low_dim = 1;
  g.maturity = static_cast<int>(curves.front().size());
  g.interpolation.neighbors = k;
  RatingGrid r{0, Matrix(xs.size(), 1), Matrix(xs.size(), g.maturity)};
  for (std::size_t i = 0; i < xs.size(); ++i) {
    r.coords(i, 0) = xs[i];
    for (int t = 0; t < g.maturity; ++t) r.curves(i, t) = curves[i][t];
  }
  g.ratings.push_back(r);
  return g;
}

void expect_valid_curve(const std::vector<double>& c) {
  for (std::size_t t = 0; t < c.size(); ++t) {
    ASSERT_GE(c[t], 0.0);
    ASSERT_LE(c[t], 1.0);
    if (t > 0) {
      ASSERT_GE(c[t], c[t - 1]);
    }
  }
}

}  // namespace

TEST(GridSpec, SigmaSpanNodes) {
  const auto high = benchmark_four_factor_model();
  const auto spec = GridSpec::sigma_span(high, 15, 4.0, 1000);
  ASSERT_EQ(spec.nodes.size(), 4u);
  EXPECT_EQ(spec.lattice_size() + spec.fill_points, 51625u);
  EXPECT_NEAR(spec.nodes[0].front(), -4.0 * std::sqrt(0.6 / (1 - 0.36)), 1e-9);
  EXPECT_NEAR(spec.nodes[1].back(), 4.0 * std::sqrt(0.1 / (1 - 0.9025)), 1e-9);
}

TEST(GridSpec, RejectsDegenerateNodeLists) {
  GridSpec bad{{{0.0, 1.0}, {2.0}}, 0};
  EXPECT_THROW(bad.validate(), ContractViolation);
  GridSpec unsorted{{{0.0, 1.0}, {2.0, 1.0}}, 0};
  EXPECT_THROW(unsorted.validate(), ContractViolation);
}

TEST(GridTargets, ZeroNoiseSinglePathIsDeterministicCumulativePd) {
  const auto base = benchmark_four_factor_model();
  const Matrix& a = base.state_space().transition();
  const auto high = base.with_state_space(StateSpaceSpec(a, Matrix::Zero(4, 4), Vector::Zero(4), Matrix::Zero(4, 4)));
  GridSpec spec{{{-1.0, 1.0}, {-0.5, 0.5}, {-1.0, 1.0}, {0.0, 2.0}}, 0};
  const auto starts = grid_start_points(spec, base, 1);
  const auto targets = simulate_grid_targets(high, starts, 30, 1, 1);
  for (std::size_t p = 0; p < starts.size(); ++p) {
    FactorPath path{{starts[p], starts[p]}};
    for (int k = 2; k <= 30; ++k) path.values.push_back(a * path.values.back());
    for (int r = 0; r < 3; ++r) {
      const auto ref = cumulative_pd(high, path, r);
      for (int k = 0; k < 30; ++k) ASSERT_EQ(targets[p](r, k), ref[k]);
    }
  }
}

TEST(GridTargets, LatticeOrderLastDimensionFastest) {
  const auto high = benchmark_four_factor_model();
  GridSpec spec{{{0, 1}, {0, 1}, {0, 1}, {0, 1, 2}}, 3};
  const auto pts = grid_start_points(spec, high, 5);
  ASSERT_EQ(pts.size(), 27u);
  EXPECT_EQ(pts[1](3), 1.0);
  EXPECT_EQ(pts[3](2), 1.0);
  EXPECT_EQ(pts[3](3), 0.0);
}

TEST(TrainGrid, DeskScaleSmokeTargetsMonotone) {
  const auto high = benchmark_four_factor_model();
  const auto spec = GridSpec::sigma_span(high, 5, 4.0, 50);
  const auto grid = train_grid(high, PcaMethod{benchmark_pca(high, 2)}, spec, 200, 1, 30, 3);
  ASSERT_EQ(grid.ratings.size(), 3u);
  EXPECT_TRUE(grid.dropped_points.empty());
  for (const auto& rg : grid.ratings) {
    ASSERT_EQ(rg.curves.rows(), 5 * 5 * 5 * 5 + 50);
    for (Eigen::Index p = 0; p < rg.curves.rows(); ++p) {
      ASSERT_GE(rg.curves(p, 0), 0.0);
      ASSERT_LE(rg.curves(p, 29), 1.0);
      for (int k = 1; k < 30; ++k) ASSERT_GE(rg.curves(p, k), rg.curves(p, k - 1));
    }
  }
}

TEST(TrainGrid, BayesianProjectionOfPointIsDeterministic) {
  const auto high = benchmark_four_factor_model();
  Vector a(2), q(2);
  a << 0.6, 0.95;
  q << 0.6, 0.1;
  TransitionModelParams low(4, StateSpaceSpec(a.asDiagonal(), q.asDiagonal(), Vector::Zero(2),
                                              stationary_covariance(a.asDiagonal(), q.asDiagonal())),
                            high.loadings().leftCols(2), high.levels());
  const LowMethod m = BayesianMethod{{high, low, through_the_cycle_initial(low), 1, 1e5, {}}};
  Vector x(4);
  x << 0.3, -0.4, 0.2, 1.0;
  EXPECT_EQ(project_point(m, x), project_point(m, x));
  EXPECT_EQ(project_point(m, x).size(), 2);
}

TEST(TrainGrid, ReproducibleAcrossThreadCounts) {
  const auto high = benchmark_four_factor_model();
  const auto spec = GridSpec::sigma_span(high, 3, 4.0, 20);
  const LowMethod m = PcaMethod{benchmark_pca(high, 2)};
  const auto g1 = train_grid(high, m, spec, 100, 1, 30, 11, 1);
  const auto g2 = train_grid(high, m, spec, 100, 1, 30, 11, 3);
  for (int r = 0; r < 3; ++r) {
    EXPECT_EQ(g1.ratings[r].coords, g2.ratings[r].coords);
    EXPECT_EQ(g1.ratings[r].curves, g2.ratings[r].curves);
  }
}

TEST(QueryGrid, ExactAtTrainingPoints) {
  const auto high = benchmark_four_factor_model();
  const auto grid = train_grid(high, PcaMethod{benchmark_pca(high, 2)}, GridSpec::sigma_span(high, 3, 4.0, 30), 100, 1,
                               30, 4);
  for (const auto& rg : grid.ratings)
    for (Eigen::Index p = 0; p < rg.coords.rows(); p += 7) {
      const auto c = query_grid(grid, rg.coords.row(p).transpose(), rg.rating);
      double running = 0.0;
      for (int t = 0; t < 30; ++t) {
        running = std::max(running, rg.curves(p, t));
        ASSERT_EQ(c[t], running);
      }
    }
}

TEST(QueryGrid, LinearTargetsReproducedAtMidpointsWithTwoNeighbours) {
  std::vector<double> xs;
  std::vector<std::vector<double>> curves;
  for (int i = 0; i <= 10; ++i) {
    const double x = 0.1 * i;
    xs.push_back(x);
    curves.push_back({0.1 + 0.3 * x, 0.2 + 0.5 * x});
  }
  const auto g = line_grid(xs, curves, 2);
  for (int i = 0; i < 10; ++i) {
    const double mid = 0.1 * i + 0.05;
    const auto c = query_grid(g, Vector::Constant(1, mid), 0);
    EXPECT_NEAR(c[0], 0.1 + 0.3 * mid, 1e-10);
    EXPECT_NEAR(c[1], 0.2 + 0.5 * mid, 1e-10);
  }
}

TEST(QueryGrid, OutsideBoundingBoxClampsToNearestNeighbour) {
  const auto g = line_grid({0.0, 1.0, 2.0}, {{0.1, 0.2}, {0.2, 0.3}, {0.4, 0.5}}, 8);
  const auto hi = query_grid(g, Vector::Constant(1, 5.0), 0);
  EXPECT_EQ(hi[0], 0.4);
  EXPECT_EQ(hi[1], 0.5);
  const auto lo = query_grid(g, Vector::Constant(1, -3.0), 0);
  EXPECT_EQ(lo[0], 0.1);
}

TEST(QueryGrid, OutputsClippedAndMonotone) {
  const auto g = line_grid({0.0, 1.0}, {{-0.2, 0.5, 0.3, 1.4}, {0.1, 0.05, 0.2, 0.9}}, 2);
  for (double x : {0.0, 0.3, 0.5, 1.0}) expect_valid_curve(query_grid(g, Vector::Constant(1, x), 0));
}

TEST(QueryGrid, ContinuousAtInteriorPoints) {
  const auto high = benchmark_four_factor_model();
  const auto grid = train_grid(high, PcaMethod{benchmark_pca(high, 2)}, GridSpec::sigma_span(high, 3, 4.0, 100), 100, 1,
                               30, 6);
  const auto& rg = grid.for_rating(0);
  RngStream rng(7, StreamTag::kTestPoint, 0);
  int checked = 0;
  while (checked < 100) {
    Vector x(2);
    for (int c = 0; c < 2; ++c) {
      const double lo = rg.coords.col(c).minCoeff(), hi = rg.coords.col(c).maxCoeff();
      x(c) = lo + (0.1 + 0.8 * rng.uniform()) * (hi - lo);
    }
    const Vector dx = Vector::NullaryExpr(2, [&] { return 1e-8 * rng.normal(); });
    for (int r = 0; r < 3; ++r) {
      const auto a = query_grid(grid, x, r);
      const auto b = query_grid(grid, x + dx, r);
      expect_valid_curve(a);
      for (int t = 0; t < 30; ++t) ASSERT_LT(std::abs(a[t] - b[t]), 1e-4);
    }
    ++checked;
  }
}

TEST(QueryGrid, EmptyGridAndUnknownRatingAreErrors) {
  ValuationGrid empty;
  empty.low_dim = 1;
  empty.maturity = 2;
  empty.ratings.push_back({0, Matrix(0, 1), Matrix(0, 2)});
  EXPECT_THROW(query_grid(empty, Vector::Zero(1), 0), ContractViolation);
  EXPECT_THROW(query_grid(empty, Vector::Zero(1), 1), ContractViolation);
}

TEST(AssembleGrid, MoreThanOnePercentProjectionFailuresIsError) {
  const auto high = benchmark_four_factor_model();
  const LowMethod m = PcaMethod{benchmark_pca(high, 2)};
  std::vector<Vector> starts(10, Vector::Zero(4));
  starts[3] = Vector::Zero(3);  // wrong dimension, projection throws
  std::vector<Matrix> targets(10, Matrix::Zero(3, 30));
  EXPECT_THROW(assemble_grid(m, starts, targets, 3), std::runtime_error);
}

TEST(GridTargets, ThousandPathTargetsWithinConvergenceEnvelope) {
  const auto high = benchmark_four_factor_model();
  GridSpec spec{{{-1.0, 1.0}, {-1.0, 1.0}, {-1.0, 1.0}, {-1.0, 1.0}}, 10};
  auto starts = grid_start_points(spec, high, 21);
  starts.erase(starts.begin(), starts.begin() + 16);  // keep the ten stationary draws
  const auto targets = simulate_grid_targets(high, starts, 30, 1000, 21);
  const auto reference = simulate_grid_targets(high, starts, 30, 20000, 22);
  double worst = 0.0;
  for (std::size_t p = 0; p < starts.size(); ++p)
    for (int r = 0; r < 3; ++r)
      for (int k = 0; k < 30; ++k)
        worst = std::max(worst, std::abs(targets[p](r, k) - reference[p](r, k)) / reference[p](r, k));
  EXPECT_LT(worst, 0.05);
}
