#pragma once

// Latent-factor multinomial-logit rating transition model.
//
//   T_ij(x) = g_ij exp(theta_ij) / sum_l g_il exp(theta_il),  theta = K x,
//   x_k = A x_{k-1} + eta_k,  eta_k ~ N(0, Q).
//
// Ratings are 0-based internally; the last rating is the absorbing default
// state. K has one row per (from, to) pair in row-major pair order.

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "bayesgrid/bayes.hpp"
#include "bayesgrid/linalg.hpp"
#include "bayesgrid/rng.hpp"

namespace bayesgrid {

class TransitionModelParams {
 public:
  TransitionModelParams(int num_ratings, StateSpaceSpec state_space, Matrix loadings, Matrix levels)
      : ratings_(num_ratings), state_(std::move(state_space)), k_(std::move(loadings)), g_(std::move(levels)) {
    const int r = ratings_;
    const int d = state_.dim();
    require(r >= 2, "a transition model needs at least two ratings");
    require(k_.rows() == static_cast<Eigen::Index>(r) * r && k_.cols() == d,
            "loading matrix must be R^2 x d (" + std::to_string(r * r) + "x" + std::to_string(d) + ")");
    require_square(g_, r, "level matrix");
    require(g_.minCoeff() >= 0.0, "level matrix entries must be nonnegative");
    const int def = r - 1;
    for (int j = 0; j < r; ++j)
      require(g_(def, j) == (j == def ? 1.0 : 0.0), "default row of the level matrix must be the unit vector e_R");
    for (int i = 0; i < r; ++i) {
      const double row_sum = g_.row(i).sum();
      require(std::abs(row_sum - 1.0) <= 1e-9, "level matrix row " + std::to_string(i + 1) + " must sum to 1");
      if (i != def) g_.row(i) /= row_sum;
      require(k_.row(pair_index(i, i)).isZero(0.0), "loading rows of diagonal transitions must be zero");
      if (i == def)
        for (int j = 0; j < r; ++j) require(k_.row(pair_index(i, j)).isZero(0.0), "default-row loadings must be zero");
    }
    pack();
  }

  int num_ratings() const { return ratings_; }
  int dim() const { return state_.dim(); }
  int default_rating() const { return ratings_ - 1; }
  int pair_index(int from, int to) const { return from * ratings_ + to; }
  const StateSpaceSpec& state_space() const { return state_; }
  const Matrix& loadings() const { return k_; }
  const Matrix& levels() const { return g_; }

  TransitionModelParams with_state_space(StateSpaceSpec spec) const { return {ratings_, std::move(spec), k_, g_}; }

  /// Writes the row-major R x R transition matrix for factor x into out.
  void fill_transition(const double* x, double* out) const {
    const int r = ratings_;
    const int d = dim();
    const int def = default_rating();
    for (int i = 0; i < def; ++i) {
      double* row = out + static_cast<std::ptrdiff_t>(i) * r;
      double theta_max = -std::numeric_limits<double>::infinity();
      for (int j = 0; j < r; ++j) {
        double theta = 0.0;
        const double* kr = &packed_k_[static_cast<std::size_t>(pair_index(i, j)) * d];
        for (int l = 0; l < d; ++l) theta += kr[l] * x[l];
        row[j] = theta;
        if (packed_g_[pair_index(i, j)] > 0.0 && theta > theta_max) theta_max = theta;
      }
      double total = 0.0;
      for (int j = 0; j < r; ++j) {
        const double g = packed_g_[pair_index(i, j)];
        row[j] = g > 0.0 ? g * std::exp(row[j] - theta_max) : 0.0;
        total += row[j];
      }
      for (int j = 0; j < r; ++j) row[j] /= total;
    }
    double* drow = out + static_cast<std::ptrdiff_t>(def) * r;
    for (int j = 0; j < r; ++j) drow[j] = j == def ? 1.0 : 0.0;
  }

 private:
  void pack() {
    const int d = dim();
    packed_k_.resize(static_cast<std::size_t>(k_.rows()) * d);
    for (Eigen::Index p = 0; p < k_.rows(); ++p)
      for (int l = 0; l < d; ++l) packed_k_[static_cast<std::size_t>(p) * d + l] = k_(p, l);
    packed_g_.resize(static_cast<std::size_t>(ratings_) * ratings_);
    for (int i = 0; i < ratings_; ++i)
      for (int j = 0; j < ratings_; ++j) packed_g_[pair_index(i, j)] = g_(i, j);
  }

  int ratings_;
  StateSpaceSpec state_;
  Matrix k_;
  Matrix g_;
  std::vector<double> packed_k_;
  std::vector<double> packed_g_;
};

using TransitionMatrix = Matrix;

/// Factor values x_0..x_T.
struct FactorPath {
  std::vector<Vector> values;
  int periods() const { return static_cast<int>(values.size()) - 1; }
};

/// Migration counts m_{ij,k} for periods k = 1..T (stored at index k-1).
struct MigrationCounts {
  std::vector<Matrix> periods;

  int num_periods() const { return static_cast<int>(periods.size()); }
  Vector row_totals(int period_index) const { return periods.at(period_index).rowwise().sum(); }
};

inline TransitionMatrix transition_matrix(const TransitionModelParams& params, const Vector& x) {
  require(x.size() == params.dim(), "factor dimension mismatch");
  const int r = params.num_ratings();
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> t(r, r);
  params.fill_transition(x.data(), t.data());
  return t;
}

namespace detail {

inline double log_multinomial_constant(const Eigen::Ref<const Eigen::RowVectorXd>& counts) {
  double total = 0.0, log_c = 0.0;
  for (Eigen::Index j = 0; j < counts.size(); ++j) {
    total += counts(j);
    log_c -= std::lgamma(counts(j) + 1.0);
  }
  return log_c + std::lgamma(total + 1.0);
}

}  // namespace detail

/// Sum over periods and rows of the multinomial log-density, constants included.
inline double log_likelihood(const TransitionModelParams& params, const MigrationCounts& counts,
                             const FactorPath& path) {
  require(path.periods() == counts.num_periods(), "counts and factor path cover different periods");
  const int r = params.num_ratings();
  double total = 0.0;
  for (int k = 0; k < counts.num_periods(); ++k) {
    const Matrix& m = counts.periods[k];
    require(m.rows() == r && m.cols() == r, "migration count matrix must be R x R");
    const TransitionMatrix t = transition_matrix(params, path.values[k + 1]);
    for (int i = 0; i < r; ++i) {
      if (m.row(i).sum() == 0.0) continue;
      total += detail::log_multinomial_constant(m.row(i));
      for (int j = 0; j < r; ++j) {
        if (m(i, j) == 0.0) continue;
        if (t(i, j) == 0.0) return -std::numeric_limits<double>::infinity();
        total += m(i, j) * std::log(t(i, j));
      }
    }
  }
  return total;
}

/// Multinomial observation of one period's counts given the factor; real-valued
/// (pseudo) counts are allowed since only the log-density shape in x matters.
class MultinomialLogitObservation {
 public:
  MultinomialLogitObservation(const TransitionModelParams& params, Matrix counts)
      : params_(&params), counts_(std::move(counts)) {
    const int r = params.num_ratings();
    require(counts_.rows() == r && counts_.cols() == r, "migration count matrix must be R x R");
    require(counts_.minCoeff() >= 0.0, "migration counts must be nonnegative");
    totals_ = counts_.rowwise().sum();
    log_constant_ = 0.0;
    for (int i = 0; i < r; ++i)
      if (totals_(i) > 0.0) log_constant_ += detail::log_multinomial_constant(counts_.row(i));
    transition_.resize(static_cast<std::size_t>(r) * r);
  }

  double log_density(const Vector& x) const {
    const int r = params_->num_ratings();
    params_->fill_transition(x.data(), transition_.data());
    double total = log_constant_;
    for (int i = 0; i < params_->default_rating(); ++i) {
      if (totals_(i) == 0.0) continue;
      for (int j = 0; j < r; ++j) {
        const double m = counts_(i, j);
        if (m == 0.0) continue;
        const double t = transition_[static_cast<std::size_t>(i) * r + j];
        if (t == 0.0) return -std::numeric_limits<double>::infinity();
        total += m * std::log(t);
      }
    }
    return total;
  }

  LocalExpansion expand(const Vector& x) const {
    const int r = params_->num_ratings();
    const int d = params_->dim();
    LocalExpansion e{log_density(x), Vector::Zero(d), Matrix::Zero(d, d)};
    const Matrix& k = params_->loadings();
    Vector probs(r);
    for (int i = 0; i < params_->default_rating(); ++i) {
      const double n = totals_(i);
      if (n == 0.0) continue;
      for (int j = 0; j < r; ++j) probs(j) = transition_[static_cast<std::size_t>(i) * r + j];
      const auto block = k.middleRows(static_cast<Eigen::Index>(i) * r, r);
      const Vector residual = counts_.row(i).transpose() - n * probs;
      e.gradient.noalias() += block.transpose() * residual;
      const Vector mean_loading = block.transpose() * probs;
      e.hessian.noalias() -= n * (block.transpose() * probs.asDiagonal() * block);
      e.hessian.noalias() += n * (mean_loading * mean_loading.transpose());
    }
    e.hessian = symmetrized(e.hessian);
    return e;
  }

  bool is_quadratic() const { return false; }
  const Matrix& counts() const { return counts_; }

 private:
  const TransitionModelParams* params_;
  Matrix counts_;
  Vector totals_;
  double log_constant_ = 0.0;
  mutable std::vector<double> transition_;
};

// ---------------------------------------------------------------------------
// Simulation

/// Request to draw x_0 from the stationary law of the factor process.
struct StationaryDraw {};
using FactorStart = std::variant<Vector, StationaryDraw>;

inline FactorPath simulate_factors(const TransitionModelParams& params, int periods, const FactorStart& start,
                                   RngStream& rng) {
  require(periods >= 1, "simulation needs at least one period");
  const auto& spec = params.state_space();
  const int d = spec.dim();
  FactorPath path;
  path.values.reserve(periods + 1);
  if (const auto* x0 = std::get_if<Vector>(&start)) {
    require(x0->size() == d, "start factor has wrong dimension");
    path.values.push_back(*x0);
  } else {
    const Matrix root = psd_sqrt(stationary_covariance(spec.transition(), spec.process_noise()));
    Vector z(d);
    for (int l = 0; l < d; ++l) z(l) = rng.normal();
    path.values.push_back(root * z);
  }
  const Matrix noise_root = psd_sqrt(spec.process_noise());
  Vector z(d);
  for (int k = 1; k <= periods; ++k) {
    for (int l = 0; l < d; ++l) z(l) = rng.normal();
    path.values.push_back(spec.transition() * path.values.back() + noise_root * z);
  }
  return path;
}

enum class PopulationMode {
  /// Obligors carry their new rating into the next period.
  kDynamic,
  /// Every period starts from the same per-rating population (panel of cohorts).
  kFixedCohort,
};

/// One multinomial draw per (rating, period), realized as sequential binomials.
inline MigrationCounts simulate_migrations(const TransitionModelParams& params, const FactorPath& path,
                                           const std::vector<std::int64_t>& initial_counts, RngStream& rng,
                                           PopulationMode mode = PopulationMode::kDynamic) {
  const int r = params.num_ratings();
  require(static_cast<int>(initial_counts.size()) == r, "initial counts must have one entry per rating");
  for (auto c : initial_counts) require(c >= 0, "initial counts must be nonnegative");
  const int def = params.default_rating();
  std::vector<std::int64_t> population = initial_counts;
  MigrationCounts out;
  out.periods.reserve(path.periods());
  for (int k = 1; k <= path.periods(); ++k) {
    const TransitionMatrix t = transition_matrix(params, path.values[k]);
    Matrix counts = Matrix::Zero(r, r);
    for (int i = 0; i < r; ++i) {
      std::int64_t remaining = population[i];
      if (i == def) {
        counts(i, def) = static_cast<double>(remaining);
        continue;
      }
      double mass = 1.0;
      for (int j = 0; j < r && remaining > 0; ++j) {
        std::int64_t drawn = remaining;
        if (j < r - 1) {
          const double p = mass > 0.0 ? std::clamp(t(i, j) / mass, 0.0, 1.0) : 1.0;
          std::binomial_distribution<std::int64_t> binom(remaining, p);
          drawn = binom(rng);
        }
        counts(i, j) = static_cast<double>(drawn);
        remaining -= drawn;
        mass -= t(i, j);
      }
    }
    out.periods.push_back(counts);
    if (mode == PopulationMode::kDynamic) {
      for (int j = 0; j < r; ++j) population[j] = static_cast<std::int64_t>(counts.col(j).sum());
    }
  }
  return out;
}

/// Entry k-1 is (T(x_1) ... T(x_k))_{rating, D}, k = 1..T.
inline std::vector<double> cumulative_pd(const TransitionModelParams& params, const FactorPath& path,
                                         int initial_rating) {
  const int r = params.num_ratings();
  require(initial_rating >= 0 && initial_rating < params.default_rating(), "initial rating must be performing");
  std::vector<double> dist(r, 0.0), next(r), t(static_cast<std::size_t>(r) * r);
  dist[initial_rating] = 1.0;
  std::vector<double> out;
  out.reserve(path.periods());
  for (int k = 1; k <= path.periods(); ++k) {
    require(path.values[k].size() == params.dim(), "factor dimension mismatch");
    params.fill_transition(path.values[k].data(), t.data());
    std::fill(next.begin(), next.end(), 0.0);
    for (int i = 0; i < r; ++i) {
      if (dist[i] == 0.0) continue;
      for (int j = 0; j < r; ++j) next[j] += dist[i] * t[static_cast<std::size_t>(i) * r + j];
    }
    dist.swap(next);
    out.push_back(dist[params.default_rating()]);
  }
  return out;
}

/// Monte Carlo expected cumulative PD term structures from a factor state.
///
/// Period 1 uses T(start); each later period first advances the factor one
/// step under the model dynamics. Row r of the result (performing ratings
/// only) holds E[PD_r(k)] for k = 1..maturity. Paths are drawn from `rng`.
inline Matrix expected_pd_curves(const TransitionModelParams& params, const Vector& start, int maturity, int n_paths,
                                 RngStream& rng) {
  require(maturity >= 1, "maturity must be at least one period");
  require(n_paths >= 1, "at least one path is required");
  require(start.size() == params.dim(), "start factor has wrong dimension");
  const int r = params.num_ratings();
  const int d = params.dim();
  const int perf = params.default_rating();
  const int def = params.default_rating();
  const Matrix& a = params.state_space().transition();
  const Matrix noise_root = psd_sqrt(params.state_space().process_noise());

  std::vector<double> t(static_cast<std::size_t>(r) * r);
  params.fill_transition(start.data(), t.data());
  // Distribution after period 1 (identical across paths).
  std::vector<double> first(static_cast<std::size_t>(perf) * r);
  for (int s = 0; s < perf; ++s)
    for (int j = 0; j < r; ++j) first[static_cast<std::size_t>(s) * r + j] = t[static_cast<std::size_t>(s) * r + j];

  Matrix sums = Matrix::Zero(perf, maturity);
  std::vector<double> x(d), xn(d), z(d), dist(first.size()), next(first.size());
  for (int p = 0; p < n_paths; ++p) {
    for (int l = 0; l < d; ++l) x[l] = start(l);
    dist = first;
    for (int s = 0; s < perf; ++s) sums(s, 0) += dist[static_cast<std::size_t>(s) * r + def];
    for (int k = 2; k <= maturity; ++k) {
      for (int l = 0; l < d; ++l) z[l] = rng.normal();
      for (int l = 0; l < d; ++l) {
        double v = 0.0;
        for (int m = 0; m < d; ++m) v += a(l, m) * x[m] + noise_root(l, m) * z[m];
        xn[l] = v;
      }
      x.swap(xn);
      params.fill_transition(x.data(), t.data());
      std::fill(next.begin(), next.end(), 0.0);
      for (int s = 0; s < perf; ++s) {
        const double* ds = &dist[static_cast<std::size_t>(s) * r];
        double* ns = &next[static_cast<std::size_t>(s) * r];
        for (int i = 0; i < r; ++i) {
          const double w = ds[i];
          if (w == 0.0) continue;
          const double* ti = &t[static_cast<std::size_t>(i) * r];
          for (int j = 0; j < r; ++j) ns[j] += w * ti[j];
        }
      }
      dist.swap(next);
      for (int s = 0; s < perf; ++s) sums(s, k - 1) += dist[static_cast<std::size_t>(s) * r + def];
    }
  }
  return sums / static_cast<double>(n_paths);
}

}  // namespace bayesgrid
