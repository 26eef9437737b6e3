#pragma once

#include <cstddef>
#include <vector>

namespace changeseg::linalg {

// Small dense row-major square matrix in double precision. The label
// expansion math never exceeds 8 x 8, so nothing here is blocked or
// vectorized.
struct Matrix {
  std::size_t n = 0;
  std::vector<double> a;

  Matrix() = default;
  explicit Matrix(std::size_t n, double fill = 0.0) : n(n), a(n * n, fill) {}
  static Matrix identity(std::size_t n);

  double& operator()(std::size_t i, std::size_t j) { return a[i * n + j]; }
  double operator()(std::size_t i, std::size_t j) const { return a[i * n + j]; }
};

struct EigenDecomposition {
  std::vector<double> values;   // descending
  Matrix vectors;               // column j is the eigenvector of values[j]
};

// Cyclic Jacobi rotations for a symmetric matrix; converges to machine
// precision for the sizes used here.
EigenDecomposition symmetric_eigen(const Matrix& m);

// Cholesky factor L (lower) with m = L L^T. Returns false when a pivot is not
// strictly positive.
bool cholesky(const Matrix& m, Matrix& lower);

// Inverse of a symmetric positive-definite matrix via Cholesky; throws
// NumericalError when the matrix is not positive definite.
Matrix spd_inverse(const Matrix& m);

}  // namespace changeseg::linalg
