#pragma once

// The four-factor benchmark transition model (three performing ratings plus
// default) and the collateral process used throughout the experiments.

#include "bayesgrid/bayes.hpp"
#include "bayesgrid/lgd.hpp"
#include "bayesgrid/transition.hpp"

namespace bayesgrid {

inline TransitionModelParams benchmark_four_factor_model() {
  Vector a_diag(4), q_diag(4);
  a_diag << 0.6, 0.95, 0.9, 0.5;
  q_diag << 0.6, 0.1, 0.1, 0.7;
  const Matrix a = a_diag.asDiagonal();
  const Matrix q = q_diag.asDiagonal();

  Matrix k = Matrix::Zero(16, 4);
  k.row(1) << 0.2, 0.04, 0.06, 0.1;
  k.row(2) << 0.12, -0.36, 0.12, -0.04;
  k.row(3) << 0.38, -0.28, -0.26, -0.08;
  k.row(4) << -0.17, 0.34, 0.18, -0.01;
  k.row(6) << 0.02, -0.27, 0.08, -0.01;
  k.row(7) << -0.07, -0.14, 0.16, -0.05;
  k.row(8) << -0.22, -0.11, 0.01, 0.12;
  k.row(9) << -0.03, -0.2, 0.01, 0.22;
  k.row(11) << -0.08, 0.09, -0.05, -0.03;

  Matrix g(4, 4);
  g << 0.95, 0.03, 0.0198, 0.0002,
       0.05, 0.9, 0.04, 0.01,
       0.05, 0.12, 0.78, 0.05,
       0.0, 0.0, 0.0, 1.0;

  StateSpaceSpec spec(a, q, Vector::Zero(4), stationary_covariance(a, q));
  return {4, spec, k, g};
}

inline CollateralParams benchmark_collateral() { return {0.0, 0.73, 0.04, 0.0}; }

}  // namespace bayesgrid
