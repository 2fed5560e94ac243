#pragma once

#include <cstddef>
#include <vector>

#include "contextflow/core/ndarray.hpp"

namespace contextflow {

// Pivot magnitudes below this are treated as singular.
inline constexpr double kSingularPivot = 1e-12;

// LU factorization with partial pivoting of a square matrix, kept for
// determinant, solve and inverse. PA = LU with unit-diagonal L stored in
// the strict lower triangle of lu.
struct LuFactors {
  std::size_t n = 0;
  std::vector<double> lu;       // n*n, row-major
  std::vector<std::size_t> perm;  // row swaps applied, perm[i] = source row
  int sign = 1;                 // determinant sign of the permutation

  double logabsdet() const;
  int det_sign() const;

  // Solve A x = b for one right-hand side.
  std::vector<double> solve(const std::vector<double>& b) const;
};

// Throws SingularMatrixError when a pivot magnitude falls below
// kSingularPivot. m must be square with side <= 1024.
LuFactors lu_factor(const NdArray& m);

struct SignLogDet {
  int sign;
  double logabsdet;
};

// sign and log|det m| via LU with partial pivoting.
SignLogDet lu_logabsdet(const NdArray& m);

// A^{-1} via LU, column by column.
NdArray lu_inverse(const NdArray& m);

// Uniformly random orthogonal matrix (QR of a Gaussian matrix via
// Householder reflections, sign-fixed R diagonal). log|det| is 0.
NdArray random_orthogonal(std::size_t n, Rng& rng);

}  // namespace contextflow
