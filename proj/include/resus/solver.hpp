// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "resus/mat.hpp"

namespace resus {

// Cholesky factorization of a symmetric positive-definite matrix, retained so
// a solve and its adjoint reuse the same factor. Always double precision.
class CholeskyFactor {
 public:
  // Factors M (must be symmetric). If the plain factorization fails, a jitter
  // of 1e-8 * trace(M)/n is added to the diagonal and escalated x10 up to
  // three times before SingularSystemError is thrown.
  explicit CholeskyFactor(const Mat& m);

  // Solves M x = b for each column of b using the stored factor.
  Mat solve(const Mat& b) const;

  int dim() const { return L_.rows; }
  double jitter() const { return jitter_; }
  bool jittered() const { return jitter_ > 0.0; }

 private:
  Mat L_;
  double jitter_ = 0.0;
};

// x with M x = b via SPD factorization; never forms an explicit inverse.
Mat solve_spd(const Mat& m, const Mat& b);

// Adjoint of x = solve_spd(M, b): db = solve(M, dx) and
// dM = -(db x^T + x db^T) / 2 (the symmetrized form). Accumulates into
// d_m / d_b, which must already have the right shapes.
void solve_spd_adjoint(const CholeskyFactor& factor, const Mat& x, const Mat& dx, Mat& d_m, Mat& d_b);

}  // namespace resus
