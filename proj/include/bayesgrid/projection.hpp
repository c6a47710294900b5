#pragma once

// Dimension reduction of simulated factor paths.
//
// Bayesian projection: the transition matrices T(x_{k,H}) generated by a
// high-dimensional model are treated as observations of a low-dimensional
// model (as pseudo-counts N0 * T per performing row), and the low factors are
// the smoothed posterior means from mode estimation under the low model.
//
// PCA projection: scores on the leading eigenvectors of the factor sample
// covariance, reconstructed back into the high-dimensional space.

#include <algorithm>
#include <numeric>
#include <span>
#include <vector>

#include "bayesgrid/bayes.hpp"
#include "bayesgrid/transition.hpp"

namespace bayesgrid {

struct ProjectionProblem {
  TransitionModelParams high;
  TransitionModelParams low;
  /// Law of x_0 under the low model (point mass for PiT, stationary for TtC).
  GaussianBelief initial_low;
  int horizon = 1;
  /// Pseudo-count weight per performing rating row.
  double pseudo_count = 1e5;
  ModeOptions mode{};

  void validate() const {
    require(high.num_ratings() == low.num_ratings(), "high and low models must share the rating scale");
    require(horizon >= 1, "projection horizon must be at least one period");
    require(pseudo_count > 0.0, "pseudo-count weight must be positive");
    require(initial_low.mean.size() == low.dim(), "initial low-model mean has wrong dimension");
    require_square(initial_low.cov, low.dim(), "initial low-model covariance");
  }
};

/// Through-the-cycle initial law: the stationary distribution of the low model.
inline GaussianBelief through_the_cycle_initial(const TransitionModelParams& low) {
  return stationary_distribution(low.state_space());
}

/// Point-in-time initial law: a point mass at the given state.
inline GaussianBelief point_in_time_initial(const Vector& state) {
  return {state, Matrix::Zero(state.size(), state.size())};
}

/// T(x_{k,H}) for k = 1..h+1.
inline std::vector<TransitionMatrix> synthetic_observations(const ProjectionProblem& problem,
                                                            const FactorPath& high_path) {
  require(high_path.periods() >= problem.horizon + 1, "high path must cover periods 0..h+1");
  std::vector<TransitionMatrix> out;
  out.reserve(problem.horizon + 1);
  for (int k = 1; k <= problem.horizon + 1; ++k) {
    require(high_path.values[k].size() == problem.high.dim(), "high path has wrong factor dimension");
    out.push_back(transition_matrix(problem.high, high_path.values[k]));
  }
  return out;
}

/// Pseudo-counts N0 * T on performing rows; the default row carries no data.
inline Matrix pseudo_counts(const TransitionMatrix& t, int default_rating, double weight) {
  Matrix m = weight * t;
  m.row(default_rating).setZero();
  return m;
}

/// Smoothed low-model means E[x_{k,L} | T(x_{1:h+1,H})]; values[k] for k = 1..h,
/// values[0] is the initial low-model mean.
inline FactorPath project_bayesian(const ProjectionProblem& problem, const FactorPath& high_path) {
  problem.validate();
  const auto observations = synthetic_observations(problem, high_path);
  std::vector<MultinomialLogitObservation> models;
  models.reserve(observations.size());
  for (const auto& t : observations)
    models.emplace_back(problem.low, pseudo_counts(t, problem.low.default_rating(), problem.pseudo_count));
  const auto spec = problem.low.state_space().with_initial(problem.initial_low.mean, problem.initial_low.cov);
  const auto estimate = mode_estimate(models, spec, problem.mode);
  FactorPath low;
  low.values.reserve(problem.horizon + 1);
  low.values.push_back(problem.initial_low.mean);
  for (int k = 1; k <= problem.horizon; ++k) low.values.push_back(estimate.smoothed[k - 1].mean);
  return low;
}

// ---------------------------------------------------------------------------
// PCA

struct PcaBasis {
  Vector mean;
  /// d x n_components, orthonormal columns ordered by descending eigenvalue.
  Matrix components;
  /// All d eigenvalues of the sample covariance, descending.
  Vector eigenvalues;

  int dim() const { return static_cast<int>(mean.size()); }
  int n_components() const { return static_cast<int>(components.cols()); }
  Vector explained_variance_ratio() const { return eigenvalues / eigenvalues.sum(); }
};

/// Eigen-decomposition of the covariance of the pooled factor vectors.
inline PcaBasis pca_fit(std::span<const FactorPath> sample_paths, int n_components) {
  require(!sample_paths.empty() && !sample_paths.front().values.empty(), "PCA needs a non-empty sample");
  const auto d = sample_paths.front().values.front().size();
  require(n_components >= 1 && n_components <= d, "number of components must lie in 1..d");
  std::size_t n = 0;
  Vector mean = Vector::Zero(d);
  for (const auto& path : sample_paths)
    for (const auto& x : path.values) {
      require(x.size() == d, "PCA sample has inconsistent dimensions");
      mean += x;
      ++n;
    }
  require(n >= static_cast<std::size_t>(10 * d), "PCA sample must contain at least 10 d vectors");
  mean /= static_cast<double>(n);
  Matrix cov = Matrix::Zero(d, d);
  for (const auto& path : sample_paths)
    for (const auto& x : path.values) {
      const Vector c = x - mean;
      cov.noalias() += c * c.transpose();
    }
  cov /= static_cast<double>(n - 1);

  Eigen::SelfAdjointEigenSolver<Matrix> eig(symmetrized(cov));
  std::vector<Eigen::Index> order(d);
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](auto a, auto b) { return eig.eigenvalues()(a) > eig.eigenvalues()(b); });
  PcaBasis basis{mean, Matrix(d, n_components), Vector(d)};
  for (Eigen::Index i = 0; i < d; ++i) basis.eigenvalues(i) = std::max(0.0, eig.eigenvalues()(order[i]));
  const double top = std::max(basis.eigenvalues(0), 0.0);
  if (!(basis.eigenvalues(n_components - 1) > 1e-12 * top))
    throw DomainError("sample covariance has rank below the requested number of components");
  for (int c = 0; c < n_components; ++c) {
    Vector v = eig.eigenvectors().col(order[c]);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0.0) v = -v;
    basis.components.col(c) = v;
  }
  return basis;
}

inline PcaBasis pca_fit(const std::vector<FactorPath>& sample_paths, int n_components) {
  return pca_fit(std::span<const FactorPath>(sample_paths), n_components);
}

struct PcaProjection {
  FactorPath scores;
  FactorPath reconstructed;
};

inline Vector pca_scores(const PcaBasis& basis, const Vector& x) {
  require(x.size() == basis.dim(), "PCA basis dimension mismatch");
  return basis.components.transpose() * (x - basis.mean);
}

inline PcaProjection project_pca(const PcaBasis& basis, const FactorPath& high_path) {
  PcaProjection out;
  out.scores.values.reserve(high_path.values.size());
  out.reconstructed.values.reserve(high_path.values.size());
  for (const auto& x : high_path.values) {
    Vector s = pca_scores(basis, x);
    out.reconstructed.values.push_back(basis.mean + basis.components * s);
    out.scores.values.push_back(std::move(s));
  }
  return out;
}

/// ||T_hat - T||_F / ||T||_F over the performing rows.
inline double relative_matrix_error(const TransitionMatrix& approx, const TransitionMatrix& truth, int default_rating) {
  const double scale = truth.topRows(default_rating).norm();
  require(scale > 0.0, "reference transition matrix has no performing mass");
  return (approx - truth).topRows(default_rating).norm() / scale;
}

/// Mean absolute relative error |T_hat - T| / T over performing-row entries with T > 0.
inline double relative_transition_error(const TransitionMatrix& approx, const TransitionMatrix& truth,
                                        int default_rating, int only_row = -1) {
  double total = 0.0;
  int count = 0;
  for (int i = 0; i < default_rating; ++i) {
    if (only_row >= 0 && i != only_row) continue;
    for (Eigen::Index j = 0; j < truth.cols(); ++j) {
      if (truth(i, j) <= 0.0) continue;
      total += std::abs(approx(i, j) - truth(i, j)) / truth(i, j);
      ++count;
    }
  }
  return count > 0 ? total / count : 0.0;
}

}  // namespace bayesgrid
