#include "contextflow/core/linalg.hpp"

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>

#include "contextflow/core/error.hpp"

namespace contextflow {

double LuFactors::logabsdet() const {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::log(std::fabs(lu[i * n + i]));
  return s;
}

int LuFactors::det_sign() const {
  int s = sign;
  for (std::size_t i = 0; i < n; ++i) {
    if (lu[i * n + i] < 0.0) s = -s;
  }
  return s;
}

std::vector<double> LuFactors::solve(const std::vector<double>& b) const {
  if (b.size() != n) throw ConfigError("LuFactors::solve: rhs size mismatch");
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) {
    double v = b[perm[i]];
    for (std::size_t k = 0; k < i; ++k) v -= lu[i * n + k] * x[k];
    x[i] = v;
  }
  for (std::size_t ii = n; ii-- > 0;) {
    double v = x[ii];
    for (std::size_t k = ii + 1; k < n; ++k) v -= lu[ii * n + k] * x[k];
    x[ii] = v / lu[ii * n + ii];
  }
  return x;
}

LuFactors lu_factor(const NdArray& m) {
  if (m.rank() != 2 || m.extent(0) != m.extent(1)) {
    throw ConfigError("lu_factor: matrix must be square, got " + shape_str(m.shape()));
  }
  const std::size_t n = m.extent(0);
  if (n > 1024) throw ConfigError("lu_factor: side " + std::to_string(n) + " exceeds 1024");

  LuFactors f;
  f.n = n;
  f.lu = m.vec();
  f.perm.resize(n);
  for (std::size_t i = 0; i < n; ++i) f.perm[i] = i;

  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    double best = std::fabs(f.lu[col * n + col]);
    for (std::size_t r = col + 1; r < n; ++r) {
      const double a = std::fabs(f.lu[r * n + col]);
      if (a > best) {
        best = a;
        piv = r;
      }
    }
    if (best < kSingularPivot) {
      throw SingularMatrixError("matrix singular to working precision (pivot " +
                                std::to_string(best) + " at column " + std::to_string(col) + ")");
    }
    if (piv != col) {
      for (std::size_t k = 0; k < n; ++k) std::swap(f.lu[col * n + k], f.lu[piv * n + k]);
      std::swap(f.perm[col], f.perm[piv]);
      f.sign = -f.sign;
    }
    const double d = f.lu[col * n + col];
    for (std::size_t r = col + 1; r < n; ++r) {
      const double factor = f.lu[r * n + col] / d;
      f.lu[r * n + col] = factor;
      for (std::size_t k = col + 1; k < n; ++k) f.lu[r * n + k] -= factor * f.lu[col * n + k];
    }
  }
  return f;
}

SignLogDet lu_logabsdet(const NdArray& m) {
  const LuFactors f = lu_factor(m);
  return SignLogDet{f.det_sign(), f.logabsdet()};
}

NdArray lu_inverse(const NdArray& m) {
  const LuFactors f = lu_factor(m);
  const std::size_t n = f.n;
  NdArray inv(Shape{n, n});
  std::vector<double> e(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    e[j] = 1.0;
    const std::vector<double> col = f.solve(e);
    e[j] = 0.0;
    for (std::size_t i = 0; i < n; ++i) inv[i * n + j] = col[i];
  }
  return inv;
}

NdArray random_orthogonal(std::size_t n, Rng& rng) {
  // Householder QR of a Gaussian matrix; Q columns accumulated explicitly.
  NdArray a = NdArray::normal(Shape{n, n}, rng);
  NdArray q(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i) q[i * n + i] = 1.0;

  std::vector<double> v(n);
  for (std::size_t k = 0; k < n; ++k) {
    double norm = 0.0;
    for (std::size_t i = k; i < n; ++i) norm += a[i * n + k] * a[i * n + k];
    norm = std::sqrt(norm);
    if (norm == 0.0) continue;
    const double alpha = a[k * n + k] >= 0.0 ? -norm : norm;
    double vnorm2 = 0.0;
    v[k] = a[k * n + k] - alpha;
    for (std::size_t i = k + 1; i < n; ++i) v[i] = a[i * n + k];
    for (std::size_t i = k; i < n; ++i) vnorm2 += v[i] * v[i];
    if (vnorm2 < 1e-300) continue;

    // Apply H = I - 2 v v^T / (v^T v) to A (left) and accumulate into Q.
    for (std::size_t j = k; j < n; ++j) {
      double dot = 0.0;
      for (std::size_t i = k; i < n; ++i) dot += v[i] * a[i * n + j];
      const double c = 2.0 * dot / vnorm2;
      for (std::size_t i = k; i < n; ++i) a[i * n + j] -= c * v[i];
    }
    for (std::size_t j = 0; j < n; ++j) {
      double dot = 0.0;
      for (std::size_t i = k; i < n; ++i) dot += v[i] * q[j * n + i];
      const double c = 2.0 * dot / vnorm2;
      for (std::size_t i = k; i < n; ++i) q[j * n + i] -= c * v[i];
    }
  }

  // Fix signs so the distribution is Haar (R diagonal positive).
  for (std::size_t k = 0; k < n; ++k) {
    if (a[k * n + k] < 0.0) {
      for (std::size_t j = 0; j < n; ++j) q[j * n + k] = -q[j * n + k];
    }
  }
  return q;
}

}  // namespace contextflow
