// SPDX-License-Identifier: Apache-2.0
#include "resus/solver.hpp"

#include <cmath>
#include <string>

namespace resus {

namespace {

// In-place lower Cholesky; returns false on a non-positive pivot.
bool try_cholesky(Mat& l) {
  const int n = l.rows;
  for (int j = 0; j < n; ++j) {
    double d = l(j, j);
    for (int k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    if (!(d > 0.0) || !std::isfinite(d)) return false;
    const double ljj = std::sqrt(d);
    l(j, j) = ljj;
    for (int i = j + 1; i < n; ++i) {
      double s = l(i, j);
      for (int k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / ljj;
    }
    for (int k = j + 1; k < n; ++k) l(j, k) = 0.0;
  }
  return true;
}

}  // namespace

CholeskyFactor::CholeskyFactor(const Mat& m) {
  if (m.rows != m.cols) throw ShapeError("solve_spd: matrix is " + std::to_string(m.rows) + "x" + std::to_string(m.cols));
  const int n = m.rows;
  double trace = 0.0;
  for (int i = 0; i < n; ++i) trace += m(i, i);

  double jitter = 0.0;
  for (int attempt = 0; attempt <= 3; ++attempt) {
    L_ = m;
    if (jitter > 0.0)
      for (int i = 0; i < n; ++i) L_(i, i) += jitter;
    if (try_cholesky(L_)) {
      jitter_ = jitter;
      return;
    }
    jitter = (jitter == 0.0) ? 1e-8 * trace / std::max(n, 1) : jitter * 10.0;
    if (jitter <= 0.0) jitter = 1e-12;  // trace can be zero for the all-zero matrix
  }

  // Diagnostic: ratio of extreme diagonal magnitudes as a cheap condition hint.
  double dmax = 0.0, dmin = std::abs(m(0, 0));
  for (int i = 0; i < n; ++i) {
    dmax = std::max(dmax, std::abs(m(i, i)));
    dmin = std::min(dmin, std::abs(m(i, i)));
  }
  const double cond = dmin > 0.0 ? dmax / dmin : std::numeric_limits<double>::infinity();
  throw SingularSystemError("solve_spd: factorization failed after jitter escalation (n=" + std::to_string(n) +
                                ", diag ratio=" + std::to_string(cond) + ")",
                            cond);
}

Mat CholeskyFactor::solve(const Mat& b) const {
  const int n = L_.rows;
  if (b.rows != n)
    throw ShapeError("solve_spd: rhs has " + std::to_string(b.rows) + " rows, system is " + std::to_string(n));
  Mat x = b;
  for (int c = 0; c < b.cols; ++c) {
    // forward: L y = b
    for (int i = 0; i < n; ++i) {
      double s = x(i, c);
      for (int k = 0; k < i; ++k) s -= L_(i, k) * x(k, c);
      x(i, c) = s / L_(i, i);
    }
    // backward: L^T x = y
    for (int i = n - 1; i >= 0; --i) {
      double s = x(i, c);
      for (int k = i + 1; k < n; ++k) s -= L_(k, i) * x(k, c);
      x(i, c) = s / L_(i, i);
    }
  }
  return x;
}

Mat solve_spd(const Mat& m, const Mat& b) {
  return CholeskyFactor(m).solve(b);
}

void solve_spd_adjoint(const CholeskyFactor& factor, const Mat& x, const Mat& dx, Mat& d_m, Mat& d_b) {
  const Mat db = factor.solve(dx);
  for (std::size_t i = 0; i < db.size(); ++i) d_b.a[i] += db.a[i];
  // dM = -(db x^T + x db^T)/2, summed over rhs columns
  const int n = factor.dim();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      for (int c = 0; c < x.cols; ++c) s += db(i, c) * x(j, c) + x(i, c) * db(j, c);
      d_m(i, j) -= 0.5 * s;
    }
}

}  // namespace resus
