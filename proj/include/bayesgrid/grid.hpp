#pragma once

// Valuation grids: expected cumulative-PD term structures simulated under the
// high-dimensional model at a set of starting factors, indexed by the
// low-dimensional coordinates of those factors and queried by
// inverse-distance-weighted nearest-neighbour interpolation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <limits>
#include <numeric>
#include <optional>
#include <variant>
#include <vector>

#include "bayesgrid/parallel.hpp"
#include "bayesgrid/projection.hpp"
#include "bayesgrid/transition.hpp"

namespace bayesgrid {

struct GridSpec {
  /// Node list per high-model dimension; the lattice is their tensor product.
  std::vector<std::vector<double>> nodes;
  /// Extra starting points drawn from the stationary law of the high model.
  int fill_points = 1000;

  void validate() const {
    require(!nodes.empty(), "grid needs at least one dimension");
    for (const auto& list : nodes) {
      require(list.size() >= 2, "grid needs at least two nodes per dimension");
      for (std::size_t i = 1; i < list.size(); ++i) require(list[i] > list[i - 1], "grid nodes must be increasing");
    }
    require(fill_points >= 0, "fill point count must be nonnegative");
  }

  std::size_t lattice_size() const {
    std::size_t n = 1;
    for (const auto& list : nodes) n *= list.size();
    return n;
  }

  /// `count` linearly spaced nodes on [-span*sigma_i, span*sigma_i], sigma from the stationary law.
  static GridSpec sigma_span(const TransitionModelParams& high, int count, double span, int fill) {
    const Matrix cov = stationary_covariance(high.state_space().transition(), high.state_space().process_noise());
    GridSpec spec;
    spec.fill_points = fill;
    for (int i = 0; i < high.dim(); ++i) {
      const double half = span * std::sqrt(cov(i, i));
      std::vector<double> list(count);
      for (int n = 0; n < count; ++n) list[n] = -half + 2.0 * half * n / (count - 1);
      spec.nodes.push_back(std::move(list));
    }
    return spec;
  }
};

/// Lattice nodes (last dimension fastest) followed by the stationary fill draws.
inline std::vector<Vector> grid_start_points(const GridSpec& spec, const TransitionModelParams& high,
                                             std::uint64_t seed) {
  spec.validate();
  require(static_cast<int>(spec.nodes.size()) == high.dim(), "grid dimension must match the high model");
  const int d = high.dim();
  std::vector<Vector> points;
  points.reserve(spec.lattice_size() + spec.fill_points);
  std::vector<std::size_t> idx(d, 0);
  for (std::size_t n = 0; n < spec.lattice_size(); ++n) {
    Vector x(d);
    for (int i = 0; i < d; ++i) x(i) = spec.nodes[i][idx[i]];
    points.push_back(std::move(x));
    for (int i = d - 1; i >= 0; --i) {
      if (++idx[i] < spec.nodes[i].size()) break;
      idx[i] = 0;
    }
  }
  const Matrix root = psd_sqrt(stationary_covariance(high.state_space().transition(), high.state_space().process_noise()));
  for (int n = 0; n < spec.fill_points; ++n) {
    RngStream rng(seed, StreamTag::kGridStart, static_cast<std::uint64_t>(n));
    Vector z(d);
    for (int i = 0; i < d; ++i) z(i) = rng.normal();
    points.push_back(root * z);
  }
  return points;
}

/// Expected cumulative-PD curves ((R-1) x maturity) per starting point; point
/// i draws its paths from stream (seed, kGridTarget, i).
inline std::vector<Matrix> simulate_grid_targets(const TransitionModelParams& high, const std::vector<Vector>& starts,
                                                 int maturity, int n_paths, std::uint64_t seed, int threads = 1) {
  std::vector<Matrix> targets(starts.size());
  parallel_for(starts.size(), threads, [&](std::size_t i) {
    RngStream rng(seed, StreamTag::kGridTarget, i);
    targets[i] = expected_pd_curves(high, starts[i], maturity, n_paths, rng);
  });
  return targets;
}

struct BayesianMethod {
  ProjectionProblem problem;
};
struct PcaMethod {
  PcaBasis basis;
};
using LowMethod = std::variant<BayesianMethod, PcaMethod>;

inline int low_dimension(const LowMethod& method) {
  if (const auto* b = std::get_if<BayesianMethod>(&method)) return b->problem.low.dim();
  return std::get<PcaMethod>(method).basis.n_components();
}

/// Low coordinates of a factor path at the horizon.
inline Vector project_path(const LowMethod& method, const FactorPath& high_path, int horizon) {
  if (const auto* b = std::get_if<BayesianMethod>(&method)) {
    ProjectionProblem problem = b->problem;
    problem.horizon = horizon;
    return project_bayesian(problem, high_path).values[horizon];
  }
  return pca_scores(std::get<PcaMethod>(method).basis, high_path.values.at(horizon));
}

/// Low coordinates of a single factor state taken as the state at the
/// horizon; the period after it is its conditional mean A x.
inline Vector project_point(const LowMethod& method, const Vector& x) {
  if (const auto* b = std::get_if<BayesianMethod>(&method)) {
    const Vector next = b->problem.high.state_space().transition() * x;
    return project_path(method, FactorPath{{x, x, next}}, 1);
  }
  return pca_scores(std::get<PcaMethod>(method).basis, x);
}

struct IdwOptions {
  int neighbors = 8;
  double power = 2.0;
};

/// Training data for one performing initial rating.
struct RatingGrid {
  int rating = 0;
  /// points x low_dim
  Matrix coords;
  /// points x maturity
  Matrix curves;
};

struct ValuationGrid {
  int low_dim = 0;
  int maturity = 0;
  std::vector<RatingGrid> ratings;
  IdwOptions interpolation{};
  std::vector<std::size_t> dropped_points;

  const RatingGrid& for_rating(int rating) const {
    for (const auto& g : ratings)
      if (g.rating == rating) return g;
    throw ContractViolation("grid was not trained for rating " + std::to_string(rating + 1));
  }
};

/// Projects every starting point; failures are dropped (more than 1% is an error).
inline ValuationGrid assemble_grid(const LowMethod& method, const std::vector<Vector>& starts,
                                   const std::vector<Matrix>& targets, int num_performing, int threads = 1) {
  require(starts.size() == targets.size() && !starts.empty(), "grid starts and targets must match and be non-empty");
  const int low_dim = low_dimension(method);
  std::vector<std::optional<Vector>> coords(starts.size());
  parallel_for(starts.size(), threads, [&](std::size_t i) {
    try {
      coords[i] = project_point(method, starts[i]);
    } catch (const std::exception&) {
      coords[i].reset();
    }
  });
  ValuationGrid grid;
  grid.low_dim = low_dim;
  grid.maturity = static_cast<int>(targets.front().cols());
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < starts.size(); ++i) {
    if (coords[i]) {
      kept.push_back(i);
    } else {
      grid.dropped_points.push_back(i);
      std::cerr << "warning: grid point " << i << " dropped (projection failed)\n";
    }
  }
  if (grid.dropped_points.size() * 100 > starts.size())
    throw std::runtime_error("more than 1% of grid points failed to project");
  for (int r = 0; r < num_performing; ++r) {
    RatingGrid g{r, Matrix(kept.size(), low_dim), Matrix(kept.size(), grid.maturity)};
    for (std::size_t p = 0; p < kept.size(); ++p) {
      g.coords.row(p) = coords[kept[p]]->transpose();
      g.curves.row(p) = targets[kept[p]].row(r);
    }
    grid.ratings.push_back(std::move(g));
  }
  return grid;
}

inline ValuationGrid train_grid(const TransitionModelParams& high, const LowMethod& method, const GridSpec& spec,
                                int n_paths_per_point, int horizon, int maturity, std::uint64_t seed,
                                int threads = 1) {
  require(n_paths_per_point >= 1, "at least one path per grid point is required");
  require(maturity > horizon && horizon >= 1, "maturity must exceed the horizon");
  const auto starts = grid_start_points(spec, high, seed);
  const auto targets = simulate_grid_targets(high, starts, maturity, n_paths_per_point, seed, threads);
  return assemble_grid(method, starts, targets, high.default_rating(), threads);
}

/// IDW k-nearest-neighbour interpolation, clipped to [0, 1] and made monotone
/// by a running maximum. Exact at training points; nearest neighbour outside
/// the bounding box of the training coordinates.
inline std::vector<double> query_grid(const ValuationGrid& grid, const Vector& coords, int rating) {
  const RatingGrid& g = grid.for_rating(rating);
  const auto n = g.coords.rows();
  require(n > 0, "valuation grid is empty");
  require(coords.size() == g.coords.cols(), "query coordinates have wrong dimension");

  std::vector<double> dist(n);
  for (Eigen::Index p = 0; p < n; ++p) dist[p] = (g.coords.row(p).transpose() - coords).squaredNorm();
  std::vector<Eigen::Index> order(n);
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  const auto k = std::min<Eigen::Index>(std::max(1, grid.interpolation.neighbors), n);
  auto closer = [&](Eigen::Index a, Eigen::Index b) { return dist[a] < dist[b] || (dist[a] == dist[b] && a < b); };
  std::partial_sort(order.begin(), order.begin() + k, order.end(), closer);

  bool inside = true;
  for (Eigen::Index c = 0; c < coords.size(); ++c)
    inside = inside && coords(c) >= g.coords.col(c).minCoeff() && coords(c) <= g.coords.col(c).maxCoeff();

  std::vector<double> out(grid.maturity, 0.0);
  if (dist[order[0]] <= 1e-24 || !inside) {
    for (int t = 0; t < grid.maturity; ++t) out[t] = g.curves(order[0], t);
  } else {
    double weight_sum = 0.0;
    for (Eigen::Index i = 0; i < k; ++i) {
      const double w = 1.0 / std::pow(std::sqrt(dist[order[i]]), grid.interpolation.power);
      weight_sum += w;
      for (int t = 0; t < grid.maturity; ++t) out[t] += w * g.curves(order[i], t);
    }
    for (auto& v : out) v /= weight_sum;
  }
  double running = 0.0;
  for (auto& v : out) {
    v = std::clamp(v, 0.0, 1.0);
    running = std::max(running, v);
    v = running;
  }
  return out;
}

}  // namespace bayesgrid
