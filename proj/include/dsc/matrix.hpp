#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "dsc/rng.hpp"

namespace dsc {

// Row-major dense matrix of 64-bit floats. All reductions in this codebase
// run in a fixed sequential order so reruns are bit-identical.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), data(r * c, fill) {}

  static Matrix checked(std::size_t r, std::size_t c, std::vector<double> d) {
    if (d.size() != r * c)
      throw std::invalid_argument("Matrix::checked: data length mismatch");
    for (double v : d)
      if (!std::isfinite(v))
        throw std::invalid_argument("Matrix::checked: non-finite entry");
    Matrix m;
    m.rows = r;
    m.cols = c;
    m.data = std::move(d);
    return m;
  }

  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  double* row(std::size_t i) { return data.data() + i * cols; }
  const double* row(std::size_t i) const { return data.data() + i * cols; }
  std::span<const double> row_span(std::size_t i) const {
    return {row(i), cols};
  }

  bool finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  bool same_shape(const Matrix& o) const {
    return rows == o.rows && cols == o.cols;
  }
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

// C = A * B
inline Matrix matmul(const Matrix& A, const Matrix& B) {
  if (A.cols != B.rows) throw std::invalid_argument("matmul: shape mismatch");
  Matrix C(A.rows, B.cols);
  for (std::size_t i = 0; i < A.rows; ++i)
    for (std::size_t k = 0; k < A.cols; ++k) {
      const double a = A(i, k);
      if (a == 0.0) continue;
      const double* brow = B.row(k);
      double* crow = C.row(i);
      for (std::size_t j = 0; j < B.cols; ++j) crow[j] += a * brow[j];
    }
  return C;
}

// C = A * B^T
inline Matrix matmul_bt(const Matrix& A, const Matrix& B) {
  if (A.cols != B.cols) throw std::invalid_argument("matmul_bt: shape mismatch");
  Matrix C(A.rows, B.rows);
  for (std::size_t i = 0; i < A.rows; ++i)
    for (std::size_t j = 0; j < B.rows; ++j)
      C(i, j) = dot(A.row_span(i), B.row_span(j));
  return C;
}

inline Matrix transpose(const Matrix& A) {
  Matrix T(A.cols, A.rows);
  for (std::size_t i = 0; i < A.rows; ++i)
    for (std::size_t j = 0; j < A.cols; ++j) T(j, i) = A(i, j);
  return T;
}

inline Matrix gaussian_matrix(std::size_t r, std::size_t c, double std_dev,
                              Rng& rng) {
  Matrix m(r, c);
  for (double& v : m.data) v = std_dev * rng.normal();
  return m;
}

inline double max_abs_diff(const Matrix& A, const Matrix& B) {
  if (!A.same_shape(B)) throw std::invalid_argument("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < A.data.size(); ++i)
    m = std::max(m, std::fabs(A.data[i] - B.data[i]));
  return m;
}

inline double frobenius_norm(const Matrix& A) {
  double s = 0.0;
  for (double v : A.data) s += v * v;
  return std::sqrt(s);
}

}  // namespace dsc
