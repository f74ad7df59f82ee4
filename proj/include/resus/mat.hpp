// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "resus/errors.hpp"

namespace resus {

// Row-major dense matrix. Solver paths always run at T = double; float
// instantiations exist for the reduced-precision kernel contracts.
template <typename T>
struct MatT {
  int rows = 0;
  int cols = 0;
  std::vector<T> a;

  MatT() = default;
  MatT(int r, int c) : rows(r), cols(c), a(static_cast<std::size_t>(r) * static_cast<std::size_t>(c), T(0)) {}

  static MatT zeros(int r, int c) { return MatT(r, c); }

  static MatT identity(int n) {
    MatT m(n, n);
    for (int i = 0; i < n; ++i) m(i, i) = T(1);
    return m;
  }

  T& operator()(int i, int j) { return a[static_cast<std::size_t>(i) * cols + j]; }
  const T& operator()(int i, int j) const { return a[static_cast<std::size_t>(i) * cols + j]; }

  T* row(int i) { return a.data() + static_cast<std::size_t>(i) * cols; }
  const T* row(int i) const { return a.data() + static_cast<std::size_t>(i) * cols; }

  std::size_t size() const { return a.size(); }

  void fill(T x) { std::fill(a.begin(), a.end(), x); }
  void zero() { fill(T(0)); }

  bool same_shape(const MatT& o) const { return rows == o.rows && cols == o.cols; }

  bool all_finite() const {
    for (T x : a)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  }
};

using Mat = MatT<double>;
using MatF = MatT<float>;

template <typename T>
inline void require_shape(const MatT<T>& m, int r, int c, const char* what) {
  if (m.rows != r || m.cols != c)
    throw ShapeError(std::string(what) + ": expected " + std::to_string(r) + "x" + std::to_string(c) +
                     ", got " + std::to_string(m.rows) + "x" + std::to_string(m.cols));
}

}  // namespace resus
