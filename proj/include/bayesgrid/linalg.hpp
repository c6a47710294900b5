#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "bayesgrid/errors.hpp"

namespace bayesgrid {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

inline constexpr double kPsdTolerance = 1e-10;

inline Matrix symmetrized(const Matrix& m) { return 0.5 * (m + m.transpose()); }

inline bool is_symmetric(const Matrix& m, double tol = kPsdTolerance) {
  if (m.rows() != m.cols()) return false;
  return (m - m.transpose()).cwiseAbs().maxCoeff() <= tol * std::max(1.0, m.cwiseAbs().maxCoeff());
}

/// Symmetric and no eigenvalue below -tol (relative to the matrix scale).
inline bool is_psd(const Matrix& m, double tol = kPsdTolerance) {
  if (m.size() == 0) return true;
  if (!is_symmetric(m, tol)) return false;
  Eigen::SelfAdjointEigenSolver<Matrix> eig(symmetrized(m), Eigen::EigenvaluesOnly);
  return eig.eigenvalues().minCoeff() >= -tol * std::max(1.0, m.cwiseAbs().maxCoeff());
}

/// Symmetric square root S with S * S^T = m; negative roundoff eigenvalues are clipped.
inline Matrix psd_sqrt(const Matrix& m) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(symmetrized(m));
  Vector roots = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * roots.asDiagonal() * eig.eigenvectors().transpose();
}

inline double spectral_radius(const Matrix& a) {
  if (a.size() == 0) return 0.0;
  Eigen::EigenSolver<Matrix> eig(a, false);
  return eig.eigenvalues().cwiseAbs().maxCoeff();
}

/// Ratio of extreme eigenvalues of a symmetric matrix; +inf when singular.
inline double symmetric_condition(const Matrix& m) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(symmetrized(m), Eigen::EigenvaluesOnly);
  const double lo = eig.eigenvalues().cwiseAbs().minCoeff();
  const double hi = eig.eigenvalues().cwiseAbs().maxCoeff();
  if (lo == 0.0) return std::numeric_limits<double>::infinity();
  return hi / lo;
}

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ContractViolation(what);
}

inline void require_square(const Matrix& m, Eigen::Index n, const std::string& name) {
  require(m.rows() == n && m.cols() == n,
          name + " must be " + std::to_string(n) + "x" + std::to_string(n) + ", got " +
              std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
}

inline void require_psd(const Matrix& m, const std::string& name) {
  require(is_psd(m), name + " must be symmetric positive semi-definite");
}

}  // namespace bayesgrid
