#pragma once

// Approximate maximum-likelihood calibration of a transition model from
// migration counts. The likelihood of the counts is the Laplace
// approximation delivered by mode estimation; it is maximized with GSL's
// BFGS over unconstrained coordinates:
//
//   A_ll = tanh(u_l)                  (diagonal, stationary)
//   Q_ll = exp(v_l)                   (only when the noise scale is free)
//   K rows (i, j), i performing, j != i
//   g_ij = g_ii exp(w_ij), renormalized per row (structural zeros kept)

#include <gsl/gsl_errno.h>
#include <gsl/gsl_multimin.h>

#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <vector>

#include "bayesgrid/bayes.hpp"
#include "bayesgrid/transition.hpp"

namespace bayesgrid {

enum class InitialLaw {
  /// Keep the initial mean and covariance from the starting parameters.
  kFixed,
  /// x_0 ~ stationary law of the current (A, Q).
  kStationary,
};

struct CalibrationOptions {
  int max_iterations = 300;
  /// Gradient norm threshold on the per-period negative log-likelihood.
  double gradient_tol = 1e-4;
  /// Relative objective change below which the search is considered converged.
  double relative_change_tol = 1e-11;
  double fd_step = 1e-5;
  /// Q is the scale gauge of the factors (scaling x and K inversely leaves the
  /// likelihood unchanged); it stays at its initial value unless freed.
  bool free_noise_scale = false;
  InitialLaw initial_law = InitialLaw::kStationary;
  ModeOptions mode{};
};

struct CalibrationResult {
  TransitionModelParams params;
  double loglik = 0.0;
  int iterations = 0;
  int evaluations = 0;
};

/// Optimizer gave up; best() holds the best parameters seen.
class CalibrationError : public std::runtime_error {
 public:
  CalibrationError(const std::string& what, CalibrationResult best)
      : std::runtime_error(what), best_(std::move(best)) {}
  const CalibrationResult& best() const { return best_; }

 private:
  CalibrationResult best_;
};

/// Laplace-approximate log-likelihood of the counts under the parameters.
inline ModeEstimate approximate_log_likelihood(const TransitionModelParams& params, const MigrationCounts& counts,
                                               const ModeOptions& options = {}) {
  std::vector<MultinomialLogitObservation> models;
  models.reserve(counts.periods.size());
  for (const auto& m : counts.periods) models.emplace_back(params, m);
  return mode_estimate(models, params.state_space(), options);
}

namespace detail {

class CalibrationLayout {
 public:
  CalibrationLayout(const TransitionModelParams& init, const CalibrationOptions& options)
      : init_(init), options_(options) {
    const Matrix& a = init.state_space().transition();
    const int d = init.dim();
    require(a.isDiagonal(0.0), "calibration requires a diagonal transition matrix");
    require(init.state_space().process_noise().isDiagonal(0.0), "calibration requires a diagonal noise covariance");
    for (int l = 0; l < d; ++l) require(std::abs(a(l, l)) < 1.0, "initial transition entries must lie in (-1, 1)");
    if (options.free_noise_scale)
      for (int l = 0; l < d; ++l)
        require(init.state_space().process_noise()(l, l) > 0.0, "free noise entries must start positive");
    const int r = init.num_ratings();
    for (int i = 0; i < init.default_rating(); ++i) {
      require(init.levels()(i, i) > 0.0, "diagonal level entries must be positive for calibration");
      for (int j = 0; j < r; ++j) {
        if (j == i) continue;
        free_k_rows_.push_back(init.pair_index(i, j));
        if (init.levels()(i, j) > 0.0) free_g_.emplace_back(i, j);
      }
    }
  }

  std::size_t size() const {
    const std::size_t d = init_.dim();
    return d + (options_.free_noise_scale ? d : 0) + free_k_rows_.size() * d + free_g_.size();
  }

  std::vector<double> encode(const TransitionModelParams& p) const {
    std::vector<double> v;
    v.reserve(size());
    const int d = p.dim();
    for (int l = 0; l < d; ++l) v.push_back(std::atanh(p.state_space().transition()(l, l)));
    if (options_.free_noise_scale)
      for (int l = 0; l < d; ++l) v.push_back(std::log(p.state_space().process_noise()(l, l)));
    for (int row : free_k_rows_)
      for (int l = 0; l < d; ++l) v.push_back(p.loadings()(row, l));
    for (auto [i, j] : free_g_) v.push_back(std::log(p.levels()(i, j) / p.levels()(i, i)));
    return v;
  }

  TransitionModelParams decode(const double* v) const {
    const int d = init_.dim();
    const int r = init_.num_ratings();
    std::size_t pos = 0;
    Matrix a = Matrix::Zero(d, d);
    for (int l = 0; l < d; ++l) a(l, l) = std::tanh(v[pos++]);
    Matrix q = init_.state_space().process_noise();
    if (options_.free_noise_scale)
      for (int l = 0; l < d; ++l) q(l, l) = std::exp(v[pos++]);
    Matrix k = init_.loadings();
    for (int row : free_k_rows_)
      for (int l = 0; l < d; ++l) k(row, l) = v[pos++];
    Matrix g = init_.levels();
    for (int i = 0; i < init_.default_rating(); ++i)
      for (int j = 0; j < r; ++j)
        if (j != i && g(i, j) > 0.0) g(i, j) = 0.0;
    for (auto [i, j] : free_g_) g(i, j) = std::exp(v[pos++]);
    for (int i = 0; i < init_.default_rating(); ++i) {
      g(i, i) = 1.0;
      g.row(i) /= g.row(i).sum();
    }
    Vector a0 = init_.state_space().initial_mean();
    Matrix p0 = init_.state_space().initial_cov();
    if (options_.initial_law == InitialLaw::kStationary) {
      a0 = Vector::Zero(d);
      p0 = stationary_covariance(a, q);
    }
    return {r, StateSpaceSpec(a, q, a0, p0), k, g};
  }

 private:
  const TransitionModelParams& init_;
  const CalibrationOptions& options_;
  std::vector<int> free_k_rows_;
  std::vector<std::pair<int, int>> free_g_;
};

struct CalibrationState {
  const CalibrationLayout* layout;
  const MigrationCounts* counts;
  const CalibrationOptions* options;
  double scale;
  int evaluations = 0;
  std::optional<CalibrationResult> best;

  double objective(const double* v) {
    ++evaluations;
    try {
      auto params = layout->decode(v);
      const double loglik = approximate_log_likelihood(params, *counts, options->mode).approx_loglik;
      if (!std::isfinite(loglik)) return std::numeric_limits<double>::max();
      if (!best || loglik > best->loglik) best = CalibrationResult{std::move(params), loglik, 0, evaluations};
      return -loglik / scale;
    } catch (const std::exception&) {
      return std::numeric_limits<double>::max();
    }
  }

  void gradient(const double* v, std::size_t n, double* out) {
    std::vector<double> x(v, v + n);
    for (std::size_t i = 0; i < n; ++i) {
      const double h = options->fd_step * std::max(1.0, std::abs(v[i]));
      x[i] = v[i] + h;
      const double up = objective(x.data());
      x[i] = v[i] - h;
      const double down = objective(x.data());
      x[i] = v[i];
      out[i] = (up - down) / (2.0 * h);
    }
  }
};

inline double gsl_objective(const gsl_vector* v, void* state) {
  return static_cast<CalibrationState*>(state)->objective(v->data);
}
inline void gsl_gradient(const gsl_vector* v, void* state, gsl_vector* g) {
  static_cast<CalibrationState*>(state)->gradient(v->data, v->size, g->data);
}
inline void gsl_objective_gradient(const gsl_vector* v, void* state, double* f, gsl_vector* g) {
  *f = gsl_objective(v, state);
  gsl_gradient(v, state, g);
}

}  // namespace detail

/// Maximizes the mode-estimation likelihood starting from `init`, which also
/// fixes the sparsity pattern (zero loading rows, structural zero levels).
inline CalibrationResult calibrate(const MigrationCounts& counts, int dim, const TransitionModelParams& init,
                                   const CalibrationOptions& options = {}) {
  require(dim == init.dim(), "calibration dimension must match the initial parameters");
  require(counts.num_periods() >= 1, "calibration needs at least one period of counts");
  require(options.max_iterations >= 0, "iteration budget must be nonnegative");

  detail::CalibrationLayout layout(init, options);
  detail::CalibrationState state{&layout, &counts, &options, static_cast<double>(counts.num_periods()), 0, {}};
  const std::vector<double> start = layout.encode(init);
  const double start_value = state.objective(start.data());
  if (!(start_value < std::numeric_limits<double>::max()))
    throw CalibrationError("likelihood is not finite at the initial parameters", {init, -INFINITY, 0, 1});
  if (options.max_iterations == 0) return {init, -start_value * state.scale, 0, state.evaluations};

  gsl_set_error_handler_off();
  const std::size_t n = layout.size();
  std::unique_ptr<gsl_vector, decltype(&gsl_vector_free)> x(gsl_vector_alloc(n), &gsl_vector_free);
  for (std::size_t i = 0; i < n; ++i) gsl_vector_set(x.get(), i, start[i]);
  gsl_multimin_function_fdf fdf{&detail::gsl_objective, &detail::gsl_gradient, &detail::gsl_objective_gradient, n,
                                &state};
  std::unique_ptr<gsl_multimin_fdfminimizer, decltype(&gsl_multimin_fdfminimizer_free)> solver(
      gsl_multimin_fdfminimizer_alloc(gsl_multimin_fdfminimizer_vector_bfgs2, n), &gsl_multimin_fdfminimizer_free);
  gsl_multimin_fdfminimizer_set(solver.get(), &fdf, x.get(), 0.1, 0.1);

  bool converged = false;
  int iter = 0;
  double previous = solver->f;
  while (iter < options.max_iterations) {
    ++iter;
    const int status = gsl_multimin_fdfminimizer_iterate(solver.get());
    if (status == GSL_ENOPROG) {
      converged = true;
      break;
    }
    if (status != GSL_SUCCESS) break;
    const double change = std::abs(previous - solver->f);
    previous = solver->f;
    if (gsl_multimin_test_gradient(solver->gradient, options.gradient_tol) == GSL_SUCCESS ||
        change <= options.relative_change_tol * std::max(1.0, std::abs(solver->f))) {
      converged = true;
      break;
    }
  }

  CalibrationResult best = *state.best;
  best.iterations = iter;
  best.evaluations = state.evaluations;
  if (!converged) throw CalibrationError("calibration did not converge within the iteration budget", best);
  return best;
}

}  // namespace bayesgrid
