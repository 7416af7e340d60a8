#pragma once

// Dense row-major tensors (rank 0..3) plus the plain linear-algebra kernels
// used outside the differentiable graph: Cholesky, triangular solves, a
// symmetric Jacobi eigensolver, and SPD jitter escalation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace plntree {

class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

struct Tensor {
  std::vector<std::int64_t> shape;
  std::vector<double> v;

  Tensor() = default;
  explicit Tensor(std::vector<std::int64_t> s, double fill = 0.0) : shape(std::move(s)) {
    v.assign(static_cast<size_t>(numel_of(shape)), fill);
  }
  static Tensor scalar(double x) {
    Tensor t;
    t.v = {x};
    return t;
  }
  static Tensor vec(std::vector<double> data) {
    Tensor t;
    t.shape = {static_cast<std::int64_t>(data.size())};
    t.v = std::move(data);
    return t;
  }
  static Tensor mat(std::int64_t r, std::int64_t c, std::vector<double> data = {}) {
    Tensor t;
    t.shape = {r, c};
    if (data.empty())
      t.v.assign(static_cast<size_t>(r * c), 0.0);
    else {
      if (static_cast<std::int64_t>(data.size()) != r * c)
        throw std::invalid_argument("Tensor::mat: data size mismatch");
      t.v = std::move(data);
    }
    return t;
  }
  static Tensor eye(std::int64_t n) {
    Tensor t({n, n});
    for (std::int64_t i = 0; i < n; ++i) t.v[static_cast<size_t>(i * n + i)] = 1.0;
    return t;
  }

  static std::int64_t numel_of(const std::vector<std::int64_t>& s) {
    std::int64_t n = 1;
    for (auto d : s) {
      if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
      n *= d;
    }
    return n;
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(v.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  std::int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }

  double& at(std::int64_t i) { return v[static_cast<size_t>(i)]; }
  double at(std::int64_t i) const { return v[static_cast<size_t>(i)]; }
  double& at(std::int64_t i, std::int64_t j) { return v[static_cast<size_t>(i * shape[1] + j)]; }
  double at(std::int64_t i, std::int64_t j) const { return v[static_cast<size_t>(i * shape[1] + j)]; }
  double& at(std::int64_t b, std::int64_t i, std::int64_t j) {
    return v[static_cast<size_t>((b * shape[1] + i) * shape[2] + j)];
  }
  double at(std::int64_t b, std::int64_t i, std::int64_t j) const {
    return v[static_cast<size_t>((b * shape[1] + i) * shape[2] + j)];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (double x : v)
      if (!std::isfinite(x)) return false;
    return true;
  }
};

inline std::string shape_str(const Tensor& t) {
  std::string s = "[";
  for (size_t i = 0; i < t.shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(t.shape[i]);
  }
  return s + "]";
}

// ---- plain dense kernels (column count small; loops are fine here) ----

// C = A * B for row-major matrices stored flat.
inline void matmul_plain(const double* a, const double* b, double* c, std::int64_t m,
                         std::int64_t k, std::int64_t n) {
  std::fill(c, c + m * n, 0.0);
  for (std::int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::int64_t p = 0; p < k; ++p) {
      const double aval = arow[p];
      if (aval == 0.0) continue;
      const double* brow = b + p * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += aval * brow[j];
    }
  }
}

// In-place lower Cholesky of a symmetric matrix stored row-major.
// Returns the index of the first failing leading minor, or -1 on success.
inline std::int64_t cholesky_inplace(double* a, std::int64_t n) {
  for (std::int64_t j = 0; j < n; ++j) {
    double d = a[j * n + j];
    for (std::int64_t k = 0; k < j; ++k) d -= a[j * n + k] * a[j * n + k];
    if (!(d > 0.0) || !std::isfinite(d)) return j;
    const double ljj = std::sqrt(d);
    a[j * n + j] = ljj;
    for (std::int64_t i = j + 1; i < n; ++i) {
      double s = a[i * n + j];
      for (std::int64_t k = 0; k < j; ++k) s -= a[i * n + k] * a[j * n + k];
      a[i * n + j] = s / ljj;
    }
  }
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = i + 1; j < n; ++j) a[i * n + j] = 0.0;
  return -1;
}

// Symmetrize then factor, escalating diagonal jitter from 1e-4 by doubling up
// to 1e-1 before giving up. Returns the jittered matrix's factor.
inline Tensor cholesky_spd(const Tensor& sigma, double jitter0 = 1e-4, double jitter_max = 1e-1) {
  if (sigma.rank() != 2 || sigma.dim(0) != sigma.dim(1))
    throw std::invalid_argument("cholesky_spd: square matrix required");
  const std::int64_t n = sigma.dim(0);
  Tensor sym({n, n});
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < n; ++j) sym.at(i, j) = 0.5 * (sigma.at(i, j) + sigma.at(j, i));
  Tensor l = sym;
  if (cholesky_inplace(l.v.data(), n) < 0) return l;
  for (double jit = jitter0; jit <= jitter_max * (1.0 + 1e-12); jit *= 2.0) {
    l = sym;
    for (std::int64_t i = 0; i < n; ++i) l.at(i, i) += jit;
    std::int64_t bad = cholesky_inplace(l.v.data(), n);
    if (bad < 0) return l;
    if (jit * 2.0 > jitter_max * (1.0 + 1e-12)) {
      throw NumericalError("cholesky_spd: not positive definite after jitter escalation (leading minor " +
                           std::to_string(bad + 1) + ")");
    }
  }
  throw NumericalError("cholesky_spd: unreachable");
}

// Solve L x = b (lower triangular).
inline void trisolve_lower(const double* l, double* x, std::int64_t n) {
  for (std::int64_t i = 0; i < n; ++i) {
    double s = x[i];
    for (std::int64_t k = 0; k < i; ++k) s -= l[i * n + k] * x[k];
    x[i] = s / l[i * n + i];
  }
}

// Solve L^T x = b.
inline void trisolve_lower_t(const double* l, double* x, std::int64_t n) {
  for (std::int64_t i = n - 1; i >= 0; --i) {
    double s = x[i];
    for (std::int64_t k = i + 1; k < n; ++k) s -= l[k * n + i] * x[k];
    x[i] = s / l[i * n + i];
  }
}

// Inverse of an SPD matrix from its lower Cholesky factor.
inline Tensor spd_inverse_from_chol(const Tensor& l) {
  const std::int64_t n = l.dim(0);
  Tensor inv = Tensor::eye(n);
  for (std::int64_t c = 0; c < n; ++c) {
    std::vector<double> col(static_cast<size_t>(n), 0.0);
    col[static_cast<size_t>(c)] = 1.0;
    trisolve_lower(l.v.data(), col.data(), n);
    trisolve_lower_t(l.v.data(), col.data(), n);
    for (std::int64_t r = 0; r < n; ++r) inv.at(r, c) = col[static_cast<size_t>(r)];
  }
  return inv;
}

// Symmetric eigensolver (cyclic Jacobi). Returns eigenvalues ascending and
// fills eigenvectors as columns of `vecs` when non-null.
inline std::vector<double> symmetric_eigen(const Tensor& a, Tensor* vecs = nullptr,
                                           int max_sweeps = 64) {
  const std::int64_t n = a.dim(0);
  Tensor m = a;
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < n; ++j) m.at(i, j) = 0.5 * (a.at(i, j) + a.at(j, i));
  Tensor v = Tensor::eye(n);
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = i + 1; j < n; ++j) off += m.at(i, j) * m.at(i, j);
    if (off < 1e-26) break;
    for (std::int64_t p = 0; p < n; ++p) {
      for (std::int64_t q = p + 1; q < n; ++q) {
        const double apq = m.at(p, q);
        if (std::fabs(apq) < 1e-300) continue;
        const double app = m.at(p, p), aqq = m.at(q, q);
        const double tau = (aqq - app) / (2.0 * apq);
        const double t = (tau >= 0.0 ? 1.0 : -1.0) / (std::fabs(tau) + std::sqrt(1.0 + tau * tau));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = t * c;
        for (std::int64_t k = 0; k < n; ++k) {
          const double mkp = m.at(k, p), mkq = m.at(k, q);
          m.at(k, p) = c * mkp - s * mkq;
          m.at(k, q) = s * mkp + c * mkq;
        }
        for (std::int64_t k = 0; k < n; ++k) {
          const double mpk = m.at(p, k), mqk = m.at(q, k);
          m.at(p, k) = c * mpk - s * mqk;
          m.at(q, k) = s * mpk + c * mqk;
        }
        for (std::int64_t k = 0; k < n; ++k) {
          const double vkp = v.at(k, p), vkq = v.at(k, q);
          v.at(k, p) = c * vkp - s * vkq;
          v.at(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  std::vector<std::int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::int64_t i, std::int64_t j) { return m.at(i, i) < m.at(j, j); });
  std::vector<double> evals(static_cast<size_t>(n));
  Tensor sorted = Tensor::eye(n);
  for (std::int64_t c = 0; c < n; ++c) {
    evals[static_cast<size_t>(c)] = m.at(order[static_cast<size_t>(c)], order[static_cast<size_t>(c)]);
    for (std::int64_t r = 0; r < n; ++r) sorted.at(r, c) = v.at(r, order[static_cast<size_t>(c)]);
  }
  if (vecs) *vecs = sorted;
  return evals;
}

}  // namespace plntree
