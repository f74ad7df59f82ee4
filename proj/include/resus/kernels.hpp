// SPDX-License-Identifier: Apache-2.0
//
// Dense kernels with hand-derived adjoints. Every kernel has an OpenMP
// row-parallel form here and a serial twin in resus::serial with the same
// per-element summation order, so the two are bit-identical and the serial
// form doubles as the test reference.
#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>

#include "resus/mat.hpp"

namespace resus {

// Work threshold below which the parallel-for is skipped.
inline constexpr long kOmpMinWork = 1 << 14;

namespace serial {

// C = A * B
template <typename T>
void matmul(const MatT<T>& A, const MatT<T>& B, MatT<T>& C) {
  if (A.cols != B.rows)
    throw ShapeError("matmul: A is " + std::to_string(A.rows) + "x" + std::to_string(A.cols) +
                     ", B is " + std::to_string(B.rows) + "x" + std::to_string(B.cols));
  C = MatT<T>(A.rows, B.cols);
  for (int i = 0; i < A.rows; ++i) {
    const T* arow = A.row(i);
    T* crow = C.row(i);
    for (int k = 0; k < A.cols; ++k) {
      const T aik = arow[k];
      const T* brow = B.row(k);
      for (int j = 0; j < B.cols; ++j) crow[j] += aik * brow[j];
    }
  }
}

// C = A * B^T
template <typename T>
void matmul_nt(const MatT<T>& A, const MatT<T>& B, MatT<T>& C) {
  if (A.cols != B.cols)
    throw ShapeError("matmul_nt: A is " + std::to_string(A.rows) + "x" + std::to_string(A.cols) +
                     ", B^T is " + std::to_string(B.cols) + "x" + std::to_string(B.rows));
  C = MatT<T>(A.rows, B.rows);
  for (int i = 0; i < A.rows; ++i) {
    const T* arow = A.row(i);
    T* crow = C.row(i);
    for (int j = 0; j < B.rows; ++j) {
      const T* brow = B.row(j);
      T s = T(0);
      for (int k = 0; k < A.cols; ++k) s += arow[k] * brow[k];
      crow[j] = s;
    }
  }
}

// C = A^T * B
template <typename T>
void matmul_tn(const MatT<T>& A, const MatT<T>& B, MatT<T>& C) {
  if (A.rows != B.rows)
    throw ShapeError("matmul_tn: A^T is " + std::to_string(A.cols) + "x" + std::to_string(A.rows) +
                     ", B is " + std::to_string(B.rows) + "x" + std::to_string(B.cols));
  C = MatT<T>(A.cols, B.cols);
  for (int i = 0; i < A.cols; ++i) {
    T* crow = C.row(i);
    for (int k = 0; k < A.rows; ++k) {
      const T aki = A(k, i);
      const T* brow = B.row(k);
      for (int j = 0; j < B.cols; ++j) crow[j] += aki * brow[j];
    }
  }
}

}  // namespace serial

// C = A * B
template <typename T>
void matmul(const MatT<T>& A, const MatT<T>& B, MatT<T>& C) {
  if (A.cols != B.rows)
    throw ShapeError("matmul: A is " + std::to_string(A.rows) + "x" + std::to_string(A.cols) +
                     ", B is " + std::to_string(B.rows) + "x" + std::to_string(B.cols));
  C = MatT<T>(A.rows, B.cols);
  const long work = static_cast<long>(A.rows) * A.cols * B.cols;
#pragma omp parallel for schedule(static) if (work > kOmpMinWork)
  for (int i = 0; i < A.rows; ++i) {
    const T* arow = A.row(i);
    T* crow = C.row(i);
    for (int k = 0; k < A.cols; ++k) {
      const T aik = arow[k];
      const T* brow = B.row(k);
      for (int j = 0; j < B.cols; ++j) crow[j] += aik * brow[j];
    }
  }
}

// C = A * B^T
template <typename T>
void matmul_nt(const MatT<T>& A, const MatT<T>& B, MatT<T>& C) {
  if (A.cols != B.cols)
    throw ShapeError("matmul_nt: A is " + std::to_string(A.rows) + "x" + std::to_string(A.cols) +
                     ", B^T is " + std::to_string(B.cols) + "x" + std::to_string(B.rows));
  C = MatT<T>(A.rows, B.rows);
  const long work = static_cast<long>(A.rows) * A.cols * B.rows;
#pragma omp parallel for schedule(static) if (work > kOmpMinWork)
  for (int i = 0; i < A.rows; ++i) {
    const T* arow = A.row(i);
    T* crow = C.row(i);
    for (int j = 0; j < B.rows; ++j) {
      const T* brow = B.row(j);
      T s = T(0);
      for (int k = 0; k < A.cols; ++k) s += arow[k] * brow[k];
      crow[j] = s;
    }
  }
}

// C = A^T * B. Parallel over output rows (columns of A) so rows of C are
// written by exactly one thread.
template <typename T>
void matmul_tn(const MatT<T>& A, const MatT<T>& B, MatT<T>& C) {
  if (A.rows != B.rows)
    throw ShapeError("matmul_tn: A^T is " + std::to_string(A.cols) + "x" + std::to_string(A.rows) +
                     ", B is " + std::to_string(B.rows) + "x" + std::to_string(B.cols));
  C = MatT<T>(A.cols, B.cols);
  const long work = static_cast<long>(A.rows) * A.cols * B.cols;
#pragma omp parallel for schedule(static) if (work > kOmpMinWork)
  for (int i = 0; i < A.cols; ++i) {
    T* crow = C.row(i);
    for (int k = 0; k < A.rows; ++k) {
      const T aki = A(k, i);
      const T* brow = B.row(k);
      for (int j = 0; j < B.cols; ++j) crow[j] += aki * brow[j];
    }
  }
}

// Adjoint of C = A * B: dA += dC * B^T, dB += A^T * dC.
template <typename T>
void matmul_adjoint(const MatT<T>& dC, const MatT<T>& A, const MatT<T>& B, MatT<T>& dA, MatT<T>& dB) {
  MatT<T> t;
  matmul_nt(dC, B, t);
  for (std::size_t i = 0; i < t.size(); ++i) dA.a[i] += t.a[i];
  matmul_tn(A, dC, t);
  for (std::size_t i = 0; i < t.size(); ++i) dB.a[i] += t.a[i];
}

template <typename T>
T sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
void sigmoid_inplace(MatT<T>& m) {
  const long work = static_cast<long>(m.size());
#pragma omp parallel for schedule(static) if (work > kOmpMinWork)
  for (long i = 0; i < work; ++i) m.a[i] = sigmoid(m.a[i]);
}

// d/dx sigmoid(x) given y = sigmoid(x): dx += dy * y * (1 - y).
template <typename T>
void sigmoid_adjoint(const MatT<T>& dy, const MatT<T>& y, MatT<T>& dx) {
  for (std::size_t i = 0; i < y.size(); ++i) dx.a[i] += dy.a[i] * y.a[i] * (T(1) - y.a[i]);
}

inline constexpr double kProbEps = 1e-7;

template <typename T>
T clamp_prob(T p) {
  return std::min(std::max(p, T(kProbEps)), T(1) - T(kProbEps));
}

// Cross entropy of one (label, probability) pair, probability clamped so the
// result is finite for every input.
template <typename T>
T bce_loss(T y, T p) {
  const T pc = clamp_prob(p);
  return -(y * std::log(pc) + (T(1) - y) * std::log(T(1) - pc));
}

// dL/dp of the clamped cross entropy; exactly zero where the clamp is active.
template <typename T>
T bce_loss_adjoint(T y, T p) {
  if (p < T(kProbEps) || p > T(1) - T(kProbEps)) return T(0);
  return (p - y) / (p * (T(1) - p));
}

// Numerically exact logistic loss on a logit: softplus(t) - y*t.
template <typename T>
T bce_with_logits(T y, T t) {
  const T zmax = std::max(t, T(0));
  return zmax - y * t + std::log1p(std::exp(-std::abs(t)));
}

// dL/dt = sigmoid(t) - y.
template <typename T>
T bce_with_logits_adjoint(T y, T t) {
  return sigmoid(t) - y;
}

// Softmax with max-shift; output sums to 1 and is invariant to adding a
// constant to every score.
template <typename T>
void softmax_weights(std::span<const T> scores, std::span<T> out) {
  T m = scores[0];
  for (T s : scores) m = std::max(m, s);
  T z = T(0);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    out[i] = std::exp(scores[i] - m);
    z += out[i];
  }
  for (std::size_t i = 0; i < scores.size(); ++i) out[i] /= z;
}

// Adjoint of w = softmax(s): ds_i += w_i * (dw_i - sum_j w_j dw_j).
template <typename T>
void softmax_adjoint(std::span<const T> dw, std::span<const T> w, std::span<T> ds) {
  T dot = T(0);
  for (std::size_t i = 0; i < w.size(); ++i) dot += w[i] * dw[i];
  for (std::size_t i = 0; i < w.size(); ++i) ds[i] += w[i] * (dw[i] - dot);
}

template <typename T>
void relu_inplace(MatT<T>& m) {
  const long work = static_cast<long>(m.size());
#pragma omp parallel for schedule(static) if (work > kOmpMinWork)
  for (long i = 0; i < work; ++i) m.a[i] = std::max(m.a[i], T(0));
}

// Adjoint using the post-activation values: dx += dy where y > 0.
template <typename T>
void relu_adjoint(const MatT<T>& dy, const MatT<T>& y, MatT<T>& dx) {
  for (std::size_t i = 0; i < y.size(); ++i)
    if (y.a[i] > T(0)) dx.a[i] += dy.a[i];
}

// Factorization-machine pooling over F field embeddings stacked as rows of
// an F x d matrix: out = (sum_f e_f)^2 - sum_f e_f^2, elementwise. Equals
// twice the sum of pairwise elementwise products.
template <typename T>
void fm_pool(const MatT<T>& fields, MatT<T>& out) {
  out = MatT<T>(1, fields.cols);
  for (int j = 0; j < fields.cols; ++j) {
    T s = T(0), sq = T(0);
    for (int i = 0; i < fields.rows; ++i) {
      const T e = fields(i, j);
      s += e;
      sq += e * e;
    }
    out(0, j) = s * s - sq;
  }
}

// Adjoint of fm_pool: de_f = dout .* 2*(S - e_f), with S the field sum.
template <typename T>
void fm_pool_adjoint(const MatT<T>& dout, const MatT<T>& fields, MatT<T>& dfields) {
  for (int j = 0; j < fields.cols; ++j) {
    T s = T(0);
    for (int i = 0; i < fields.rows; ++i) s += fields(i, j);
    for (int i = 0; i < fields.rows; ++i) dfields(i, j) += dout(0, j) * T(2) * (s - fields(i, j));
  }
}

}  // namespace resus
