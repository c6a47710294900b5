#pragma once

// Linear-Gaussian state-space machinery: Kalman prediction and update, the
// Rauch-Tung-Striebel smoother, iterated mode estimation for log-concave
// non-Gaussian observation densities, and the stationary law of the state.

#include <cmath>
#include <concepts>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include "bayesgrid/errors.hpp"
#include "bayesgrid/linalg.hpp"

namespace bayesgrid {

/// x_k = A x_{k-1} + eta_k, eta_k ~ N(0, Q), x_0 ~ N(a0, P0).
class StateSpaceSpec {
 public:
  StateSpaceSpec(Matrix transition, Matrix process_noise, Vector initial_mean, Matrix initial_cov)
      : a_(std::move(transition)), q_(std::move(process_noise)), a0_(std::move(initial_mean)),
        p0_(std::move(initial_cov)) {
    const auto d = a_.rows();
    require(d > 0, "state dimension must be positive");
    require_square(a_, d, "transition matrix");
    require_square(q_, d, "process noise covariance");
    require_square(p0_, d, "initial covariance");
    require(a0_.size() == d, "initial mean has wrong dimension");
    require_psd(q_, "process noise covariance");
    require_psd(p0_, "initial covariance");
  }

  int dim() const { return static_cast<int>(a_.rows()); }
  const Matrix& transition() const { return a_; }
  const Matrix& process_noise() const { return q_; }
  const Vector& initial_mean() const { return a0_; }
  const Matrix& initial_cov() const { return p0_; }

  StateSpaceSpec with_initial(Vector mean, Matrix cov) const { return {a_, q_, std::move(mean), std::move(cov)}; }

 private:
  Matrix a_;
  Matrix q_;
  Vector a0_;
  Matrix p0_;
};

struct GaussianBelief {
  Vector mean;
  Matrix cov;
};

/// One forward step: the predicted (prior) and filtered (posterior) beliefs.
struct FilterStep {
  GaussianBelief predicted;
  GaussianBelief filtered;
  double loglik = 0.0;
};

/// y = H x + v, v ~ N(0, R). An observation with zero rows carries no information.
struct LinearObservation {
  Matrix design;
  Matrix noise_cov;
  Vector value;
};

struct LinearUpdate {
  GaussianBelief posterior;
  double loglik = 0.0;
};

inline constexpr double kRegularizationCondition = 1e12;
inline constexpr double kRegularizationJitter = 1e-12;

namespace detail {

// Factorizes a symmetric PD matrix, adding jitter when badly conditioned.
inline Eigen::LLT<Matrix> factor_spd(const Matrix& m, const char* what) {
  Matrix s = symmetrized(m);
  const double cond = symmetric_condition(s);
  if (!(cond <= kRegularizationCondition)) s += kRegularizationJitter * Matrix::Identity(s.rows(), s.cols());
  Eigen::LLT<Matrix> llt(s);
  if (llt.info() != Eigen::Success) throw NumericalError(std::string(what) + " is not positive definite", cond);
  return llt;
}

}  // namespace detail

inline GaussianBelief kalman_predict(const GaussianBelief& belief, const StateSpaceSpec& spec) {
  const auto d = spec.dim();
  require(belief.mean.size() == d, "belief mean dimension mismatch");
  require_square(belief.cov, d, "belief covariance");
  const Matrix& a = spec.transition();
  return {a * belief.mean, symmetrized(a * belief.cov * a.transpose() + spec.process_noise())};
}

/// Joseph-form Kalman update; loglik is log N(y; H m, S).
inline LinearUpdate kalman_update_linear(const GaussianBelief& prior, const Matrix& design, const Matrix& noise_cov,
                                         const Vector& y) {
  const auto d = prior.mean.size();
  const auto m = design.rows();
  require(design.cols() == d, "observation design has wrong number of columns");
  require_square(noise_cov, m, "observation noise covariance");
  require(y.size() == m, "observation vector has wrong dimension");
  if (m == 0) return {prior, 0.0};

  const Matrix ph = prior.cov * design.transpose();
  const Matrix innovation_cov = design * ph + noise_cov;
  const auto llt = detail::factor_spd(innovation_cov, "innovation covariance");
  const Vector innovation = y - design * prior.mean;
  const Matrix gain = llt.solve(ph.transpose()).transpose();

  const Matrix i_kh = Matrix::Identity(d, d) - gain * design;
  Matrix cov = i_kh * prior.cov * i_kh.transpose() + gain * noise_cov * gain.transpose();
  Vector mean = prior.mean + gain * innovation;

  const Matrix l = llt.matrixL();
  const double log_det = 2.0 * l.diagonal().array().log().sum();
  const double quad = innovation.dot(llt.solve(innovation));
  const double loglik = -0.5 * (static_cast<double>(m) * std::log(2.0 * std::numbers::pi) + log_det + quad);
  return {{std::move(mean), symmetrized(cov)}, loglik};
}

/// Forward pass over k = 1..T starting from the specification's initial law.
inline std::vector<FilterStep> kalman_filter(std::span<const LinearObservation> observations,
                                             const StateSpaceSpec& spec) {
  std::vector<FilterStep> steps;
  steps.reserve(observations.size());
  GaussianBelief belief{spec.initial_mean(), spec.initial_cov()};
  for (const auto& obs : observations) {
    FilterStep step;
    step.predicted = kalman_predict(belief, spec);
    auto update = kalman_update_linear(step.predicted, obs.design, obs.noise_cov, obs.value);
    step.filtered = std::move(update.posterior);
    step.loglik = update.loglik;
    belief = step.filtered;
    steps.push_back(std::move(step));
  }
  return steps;
}

/// Rauch-Tung-Striebel backward recursion; the last entry is the final filtered belief.
inline std::vector<GaussianBelief> rts_smoother(std::span<const FilterStep> filtered, const StateSpaceSpec& spec) {
  std::vector<GaussianBelief> smoothed(filtered.size());
  if (filtered.empty()) return smoothed;
  const Matrix& a = spec.transition();
  const auto last = filtered.size() - 1;
  smoothed[last] = filtered[last].filtered;
  for (std::size_t k = last; k-- > 0;) {
    const auto& post = filtered[k].filtered;
    const auto& next_prior = filtered[k + 1].predicted;
    const auto llt = detail::factor_spd(next_prior.cov, "predicted covariance in smoother gain");
    // J = P_k A^T (P_{k+1|k})^{-1}
    const Matrix gain = llt.solve(a * post.cov).transpose();
    Vector mean = post.mean + gain * (smoothed[k + 1].mean - next_prior.mean);
    Matrix cov = post.cov + gain * (smoothed[k + 1].cov - next_prior.cov) * gain.transpose();
    smoothed[k] = {std::move(mean), symmetrized(cov)};
  }
  return smoothed;
}

// ---------------------------------------------------------------------------
// Mode estimation

/// Second-order expansion of log p(y_k | x) at a point.
struct LocalExpansion {
  double value = 0.0;
  Vector gradient;
  Matrix hessian;
};

/// An observation density p(y_k | x_k) with the data folded in.
template <class M>
concept ObservationModel = requires(const M& model, const Vector& x) {
  { model.log_density(x) } -> std::convertible_to<double>;
  { model.expand(x) } -> std::convertible_to<LocalExpansion>;
  { model.is_quadratic() } -> std::convertible_to<bool>;
};

/// y ~ N(H x, R) written as an observation density (exact quadratic).
class GaussianLinearObservation {
 public:
  GaussianLinearObservation(Matrix design, Matrix noise_cov, Vector value)
      : design_(std::move(design)), noise_cov_(std::move(noise_cov)), value_(std::move(value)),
        llt_(noise_cov_) {
    require(llt_.info() == Eigen::Success, "Gaussian observation noise must be positive definite");
    const Matrix l = llt_.matrixL();
    log_norm_ = -0.5 * (static_cast<double>(value_.size()) * std::log(2.0 * std::numbers::pi) +
                        2.0 * l.diagonal().array().log().sum());
    precision_design_ = llt_.solve(design_);
  }

  double log_density(const Vector& x) const {
    const Vector r = value_ - design_ * x;
    return log_norm_ - 0.5 * r.dot(llt_.solve(r));
  }
  LocalExpansion expand(const Vector& x) const {
    const Vector r = value_ - design_ * x;
    return {log_density(x), precision_design_.transpose() * r, -design_.transpose() * precision_design_};
  }
  bool is_quadratic() const { return true; }

 private:
  Matrix design_;
  Matrix noise_cov_;
  Vector value_;
  Eigen::LLT<Matrix> llt_;
  Matrix precision_design_;
  double log_norm_ = 0.0;
};

struct ModeOptions {
  double tol = 1e-8;
  int max_iter = 50;
  /// Linearization trajectory for the first pass; defaults to the prior mean path.
  std::optional<std::vector<Vector>> initial_trajectory;
};

struct ModeEstimate {
  std::vector<GaussianBelief> smoothed;
  /// Laplace approximation of log p(y_{1:T}).
  double approx_loglik = 0.0;
  int iterations = 0;
  /// Max-norm trajectory change of each pass.
  std::vector<double> deltas;
};

namespace detail {

// Gaussian pseudo-observation whose log-density matches the quadratic
// expansion of log p(y|x) around `at` up to a constant: with -hess = U L U^T,
// H = L^{1/2} U^T, R = I and y = H at + L^{-1/2} U^T grad.
inline LinearObservation linearize(const LocalExpansion& e, const Vector& at) {
  const auto d = at.size();
  const Matrix info = symmetrized(-e.hessian);
  Eigen::SelfAdjointEigenSolver<Matrix> eig(info);
  const Vector& lambda = eig.eigenvalues();
  const double scale = std::max(1.0, lambda.cwiseAbs().maxCoeff());
  if (lambda.minCoeff() < -1e-9 * scale)
    throw NumericalError("observation log-density is not concave at the linearization point",
                         lambda.minCoeff() / scale);
  const double floor = 1e-12 * scale;
  int rank = 0;
  for (Eigen::Index i = 0; i < d; ++i) rank += lambda(i) > floor ? 1 : 0;
  LinearObservation obs{Matrix(rank, d), Matrix::Identity(rank, rank), Vector(rank)};
  int row = 0;
  for (Eigen::Index i = 0; i < d; ++i) {
    if (lambda(i) <= floor) continue;
    const auto u = eig.eigenvectors().col(i);
    const double root = std::sqrt(lambda(i));
    obs.design.row(row) = root * u.transpose();
    obs.value(row) = root * u.dot(at) + u.dot(e.gradient) / root;
    ++row;
  }
  return obs;
}

inline double gaussian_pseudo_log_density(const LinearObservation& obs, const Vector& x) {
  const Vector r = obs.value - obs.design * x;
  return -0.5 * (static_cast<double>(obs.value.size()) * std::log(2.0 * std::numbers::pi) + r.squaredNorm());
}

// log p(x_{1:T}) under the state dynamics; nullopt when a covariance is singular.
inline std::optional<double> prior_path_log_density(const std::vector<Vector>& path, const StateSpaceSpec& spec) {
  const Matrix& a = spec.transition();
  const Matrix first_cov = a * spec.initial_cov() * a.transpose() + spec.process_noise();
  Eigen::LLT<Matrix> first(symmetrized(first_cov));
  Eigen::LLT<Matrix> step(symmetrized(spec.process_noise()));
  if (first.info() != Eigen::Success || step.info() != Eigen::Success) return std::nullopt;
  auto quad = [](const Eigen::LLT<Matrix>& llt, const Vector& r) { return r.dot(llt.solve(r)); };
  double total = -0.5 * quad(first, path[0] - a * spec.initial_mean());
  for (std::size_t k = 1; k < path.size(); ++k) total -= 0.5 * quad(step, path[k] - a * path[k - 1]);
  return total;
}

template <ObservationModel M>
double joint_objective(std::span<const M> models, const std::vector<Vector>& path, double prior_part) {
  double total = prior_part;
  for (std::size_t k = 0; k < models.size(); ++k) total += models[k].log_density(path[k]);
  return total;
}

}  // namespace detail

/// Iterated linearization around the posterior mode of x_{1:T} given y_{1:T},
/// one observation model per period (Durbin-Koopman mode estimation), with
/// step halving whenever a full step lowers the joint log posterior.
template <ObservationModel M>
ModeEstimate mode_estimate(std::span<const M> models, const StateSpaceSpec& spec, const ModeOptions& options = {}) {
  require(options.tol > 0.0, "mode estimation tolerance must be positive");
  require(options.max_iter >= 1, "mode estimation needs at least one iteration");
  const std::size_t periods = models.size();
  const auto d = spec.dim();

  std::vector<Vector> trajectory;
  if (options.initial_trajectory) {
    trajectory = *options.initial_trajectory;
    require(trajectory.size() == periods, "initial trajectory length mismatch");
  } else {
    trajectory.reserve(periods);
    Vector x = spec.initial_mean();
    for (std::size_t k = 0; k < periods; ++k) {
      x = spec.transition() * x;
      trajectory.push_back(x);
    }
  }

  bool quadratic = true;
  for (const auto& m : models) quadratic = quadratic && m.is_quadratic();

  ModeEstimate result;
  std::vector<LinearObservation> pseudo(periods);
  std::vector<FilterStep> steps;
  std::optional<double> current_objective;

  for (int iter = 1; iter <= options.max_iter; ++iter) {
    for (std::size_t k = 0; k < periods; ++k) {
      require(trajectory[k].size() == d, "trajectory dimension mismatch");
      pseudo[k] = detail::linearize(models[k].expand(trajectory[k]), trajectory[k]);
    }
    steps = kalman_filter(pseudo, spec);
    result.smoothed = rts_smoother(steps, spec);
    result.iterations = iter;

    std::vector<Vector> proposal(periods);
    for (std::size_t k = 0; k < periods; ++k) proposal[k] = result.smoothed[k].mean;

    double alpha = 1.0;
    if (!quadratic) {
      if (auto prior = detail::prior_path_log_density(proposal, spec)) {
        if (!current_objective) {
          if (auto p0 = detail::prior_path_log_density(trajectory, spec))
            current_objective = detail::joint_objective(models, trajectory, *p0);
        }
        double candidate = detail::joint_objective(models, proposal, *prior);
        while (current_objective && !(candidate >= *current_objective) && alpha > 1e-6) {
          alpha *= 0.5;
          for (std::size_t k = 0; k < periods; ++k)
            proposal[k] = trajectory[k] + alpha * (result.smoothed[k].mean - trajectory[k]);
          const auto pr = detail::prior_path_log_density(proposal, spec);
          candidate = detail::joint_objective(models, proposal, pr.value_or(0.0));
        }
        current_objective = candidate;
      }
    }

    double delta = 0.0;
    for (std::size_t k = 0; k < periods; ++k)
      delta = std::max(delta, (proposal[k] - trajectory[k]).cwiseAbs().maxCoeff());
    result.deltas.push_back(delta);
    trajectory = std::move(proposal);

    if (quadratic || delta < options.tol) {
      double loglik = 0.0;
      for (std::size_t k = 0; k < periods; ++k) {
        const Vector& mode = result.smoothed[k].mean;
        loglik += steps[k].loglik + models[k].log_density(mode) - detail::gaussian_pseudo_log_density(pseudo[k], mode);
      }
      result.approx_loglik = loglik;
      return result;
    }
  }
  throw ConvergenceError("mode estimation did not converge", result.deltas.back());
}

template <ObservationModel M>
ModeEstimate mode_estimate(const std::vector<M>& models, const StateSpaceSpec& spec, const ModeOptions& options = {}) {
  return mode_estimate(std::span<const M>(models), spec, options);
}

/// Solution of P = A P A^T + Q by fixed-point iteration.
inline Matrix stationary_covariance(const Matrix& transition, const Matrix& process_noise) {
  const auto d = transition.rows();
  require_square(transition, d, "transition matrix");
  require_square(process_noise, d, "process noise covariance");
  const double rho = spectral_radius(transition);
  if (!(rho < 1.0))
    throw DomainError("stationary distribution requires spectral radius < 1, got " + std::to_string(rho));
  Matrix p = process_noise;
  for (int iter = 0; iter < 10000; ++iter) {
    Matrix next = transition * p * transition.transpose() + process_noise;
    const double change = (next - p).cwiseAbs().maxCoeff();
    p = symmetrized(next);
    if (change < 1e-12) return p;
  }
  throw ConvergenceError("Lyapunov fixed-point iteration did not converge", 0.0);
}

inline GaussianBelief stationary_distribution(const StateSpaceSpec& spec) {
  return {Vector::Zero(spec.dim()), stationary_covariance(spec.transition(), spec.process_noise())};
}

}  // namespace bayesgrid
