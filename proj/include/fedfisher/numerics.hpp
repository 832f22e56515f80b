// Copyright 2026 The FedFisher Simulator Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
// =============================================================================

// Dense linear-algebra kernels shared by the simulator: a small row-major
// matrix type, a symmetric eigensolver, power iteration, truncated SVD and
// Kronecker-structured products. GEMM-shaped work is delegated to Eigen.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Eigenvalues>

namespace fedfisher {

using Vector = std::vector<double>;

class DenseMatrix {
 public:
  DenseMatrix() = default;
  DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), entries_(rows * cols, fill) {}
  DenseMatrix(std::size_t rows, std::size_t cols, Vector entries)
      : rows_(rows), cols_(cols), entries_(std::move(entries)) {
    if (entries_.size() != rows_ * cols_) {
      throw std::invalid_argument("DenseMatrix: entry count " + std::to_string(entries_.size()) +
                                  " != rows*cols " + std::to_string(rows_ * cols_));
    }
  }
  DenseMatrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    entries_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw std::invalid_argument("DenseMatrix: ragged initializer");
      entries_.insert(entries_.end(), r.begin(), r.end());
    }
  }

  static DenseMatrix identity(std::size_t n) {
    DenseMatrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }
  static DenseMatrix diagonal(std::span<const double> d) {
    DenseMatrix m(d.size(), d.size());
    for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  bool is_square() const noexcept { return rows_ == cols_; }

  double& operator()(std::size_t i, std::size_t j) noexcept { return entries_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const noexcept { return entries_[i * cols_ + j]; }

  std::span<double> row(std::size_t i) noexcept { return {entries_.data() + i * cols_, cols_}; }
  std::span<const double> row(std::size_t i) const noexcept {
    return {entries_.data() + i * cols_, cols_};
  }

  double* data() noexcept { return entries_.data(); }
  const double* data() const noexcept { return entries_.data(); }
  const Vector& entries() const noexcept { return entries_; }

  Vector column(std::size_t j) const {
    Vector c(rows_);
    for (std::size_t i = 0; i < rows_; ++i) c[i] = (*this)(i, j);
    return c;
  }

  double trace() const noexcept {
    double t = 0.0;
    for (std::size_t i = 0; i < std::min(rows_, cols_); ++i) t += (*this)(i, i);
    return t;
  }

  DenseMatrix& operator+=(const DenseMatrix& o) {
    check_same_shape(o);
    for (std::size_t k = 0; k < entries_.size(); ++k) entries_[k] += o.entries_[k];
    return *this;
  }
  DenseMatrix& operator-=(const DenseMatrix& o) {
    check_same_shape(o);
    for (std::size_t k = 0; k < entries_.size(); ++k) entries_[k] -= o.entries_[k];
    return *this;
  }
  DenseMatrix& operator*=(double s) noexcept {
    for (double& v : entries_) v *= s;
    return *this;
  }

  friend bool operator==(const DenseMatrix&, const DenseMatrix&) = default;

 private:
  void check_same_shape(const DenseMatrix& o) const {
    if (o.rows_ != rows_ || o.cols_ != cols_) throw std::invalid_argument("DenseMatrix: shape mismatch");
  }

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  Vector entries_;
};

inline DenseMatrix operator+(DenseMatrix a, const DenseMatrix& b) { return a += b; }
inline DenseMatrix operator-(DenseMatrix a, const DenseMatrix& b) { return a -= b; }
inline DenseMatrix operator*(double s, DenseMatrix a) { return a *= s; }

namespace detail {

using RowMajorMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstRowMajorMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ColMajorMap = Eigen::Map<Eigen::MatrixXd>;
using ConstColMajorMap = Eigen::Map<const Eigen::MatrixXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;
using VecMap = Eigen::Map<Eigen::VectorXd>;

inline ConstRowMajorMap view(const DenseMatrix& m) {
  return {m.data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols())};
}
inline RowMajorMap view(DenseMatrix& m) {
  return {m.data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols())};
}
inline ConstVecMap view(std::span<const double> v) {
  return {v.data(), static_cast<Eigen::Index>(v.size())};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Vector helpers

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline double norm_inf(std::span<const double> a) {
  double m = 0.0;
  for (double v : a) m = std::max(m, std::abs(v));
  return m;
}

// y += alpha * x
inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("axpy: length mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline Vector subtract(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("subtract: length mismatch");
  Vector r(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) r[i] = a[i] - b[i];
  return r;
}

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

// ---------------------------------------------------------------------------
// Matrix products

inline Vector matvec(const DenseMatrix& a, std::span<const double> x) {
  if (a.cols() != x.size()) throw std::invalid_argument("matvec: dimension mismatch");
  Vector y(a.rows());
  detail::VecMap(y.data(), static_cast<Eigen::Index>(y.size())).noalias() = detail::view(a) * detail::view(x);
  return y;
}

inline DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: dimension mismatch");
  DenseMatrix c(a.rows(), b.cols());
  detail::view(c).noalias() = detail::view(a) * detail::view(b);
  return c;
}

inline DenseMatrix transpose(const DenseMatrix& a) {
  DenseMatrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

inline DenseMatrix outer(std::span<const double> u, std::span<const double> v) {
  DenseMatrix m(u.size(), v.size());
  for (std::size_t i = 0; i < u.size(); ++i)
    for (std::size_t j = 0; j < v.size(); ++j) m(i, j) = u[i] * v[j];
  return m;
}

// a += alpha * u u^T, touching the upper triangle only; call symmetrize_from_upper after.
inline void rank_one_update_upper(DenseMatrix& a, double alpha, std::span<const double> u) {
  const std::size_t n = u.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double s = alpha * u[i];
    if (s == 0.0) continue;
    double* row = a.data() + i * n;
    for (std::size_t j = i; j < n; ++j) row[j] += s * u[j];
  }
}

inline void symmetrize_from_upper(DenseMatrix& a) {
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < i; ++j) a(i, j) = a(j, i);
}

inline double frobenius_norm(const DenseMatrix& a) { return norm2(a.entries()); }

inline bool is_symmetric(const DenseMatrix& a, double tol = 0.0) {
  if (!a.is_square()) return false;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < i; ++j)
      if (std::abs(a(i, j) - a(j, i)) > tol) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Symmetric eigendecomposition

struct SymmetricEigen {
  Vector values;        // descending
  DenseMatrix vectors;  // column k pairs with values[k]
};

inline SymmetricEigen symmetric_eigen(const DenseMatrix& a) {
  if (!a.is_square()) throw std::invalid_argument("symmetric_eigen: matrix must be square");
  const std::size_t n = a.rows();
  if (n == 0) return {};
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(Eigen::MatrixXd(detail::view(a)));
  if (solver.info() != Eigen::Success) throw std::runtime_error("symmetric_eigen: no convergence");
  // Eigen sorts ascending.
  SymmetricEigen out;
  out.values.resize(n);
  out.vectors = DenseMatrix(n, n);
  for (std::size_t k = 0; k < n; ++k) {
    const auto src = static_cast<Eigen::Index>(n - 1 - k);
    out.values[k] = solver.eigenvalues()[src];
    for (std::size_t i = 0; i < n; ++i) out.vectors(i, k) = solver.eigenvectors()(static_cast<Eigen::Index>(i), src);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Power iteration

struct EigenEstimate {
  double eigenvalue = 0.0;
  Vector eigenvector;
  bool converged = false;
  std::size_t iterations = 0;
};

namespace detail {

template <class Apply>
EigenEstimate power_iterate(Apply& apply, Vector v, double tol, std::size_t max_iters) {
  EigenEstimate est;
  double nv = norm2(v);
  for (double& x : v) x /= nv;
  for (std::size_t it = 1; it <= max_iters; ++it) {
    Vector av = apply(std::span<const double>(v));
    const double lambda = dot(v, av);
    double resid = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) resid += (av[i] - lambda * v[i]) * (av[i] - lambda * v[i]);
    resid = std::sqrt(resid);
    est.eigenvalue = lambda;
    est.eigenvector = v;
    est.iterations = it;
    const double nav = norm2(av);
    if (nav == 0.0) {
      est.converged = true;
      return est;
    }
    if (resid <= tol * (std::abs(lambda) + 1.0)) {
      est.converged = true;
      return est;
    }
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = av[i] / nav;
  }
  return est;
}

}  // namespace detail

/// Largest eigenvalue of a symmetric PSD operator given as a callable
/// `Vector(std::span<const double>)`. Starts from the normalised all-ones
/// vector; if that start is annihilated by the operator or fails to
/// converge, one restart from a fixed pseudo-random vector is attempted.
template <class Apply>
EigenEstimate power_iteration_max_eig(Apply&& apply, std::size_t dim, double tol, std::size_t max_iters) {
  if (dim == 0) throw std::invalid_argument("power_iteration_max_eig: dim must be >= 1");
  if (!(tol > 0.0)) throw std::invalid_argument("power_iteration_max_eig: tol must be positive");
  EigenEstimate first = detail::power_iterate(apply, Vector(dim, 1.0), tol, max_iters);
  const bool stagnated = !first.converged || (first.eigenvalue == 0.0 && first.iterations == 1);
  if (!stagnated) return first;

  std::mt19937_64 gen(0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> normal;
  Vector start(dim);
  for (double& x : start) x = normal(gen);
  EigenEstimate second = detail::power_iterate(apply, std::move(start), tol, max_iters);
  second.iterations += first.iterations;
  if (second.eigenvalue >= first.eigenvalue) return second;
  first.iterations = second.iterations;
  return first;
}

inline EigenEstimate power_iteration_max_eig(const DenseMatrix& a, double tol, std::size_t max_iters) {
  if (!a.is_square()) throw std::invalid_argument("power_iteration_max_eig: matrix must be square");
  return power_iteration_max_eig([&a](std::span<const double> x) { return matvec(a, x); }, a.rows(), tol,
                                 max_iters);
}

// ---------------------------------------------------------------------------
// Truncated SVD

struct LowRankFactors {
  DenseMatrix u;  // rows x k
  Vector sigma;   // k, descending
  DenseMatrix v;  // cols x k

  std::size_t rank() const noexcept { return sigma.size(); }

  DenseMatrix reconstruct() const {
    DenseMatrix us = u;
    for (std::size_t i = 0; i < us.rows(); ++i)
      for (std::size_t k = 0; k < sigma.size(); ++k) us(i, k) *= sigma[k];
    DenseMatrix out(u.rows(), v.rows());
    if (!sigma.empty()) detail::view(out).noalias() = detail::view(us) * detail::view(v).transpose();
    return out;
  }
};

namespace detail {

// Fills column k of `q` (n x cols) with a unit vector orthogonal to columns [0, k).
inline void orthogonal_completion(DenseMatrix& q, std::size_t k) {
  const std::size_t n = q.rows();
  for (std::size_t cand = 0; cand < n; ++cand) {
    Vector c(n, 0.0);
    c[cand] = 1.0;
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t j = 0; j < k; ++j) {
        double proj = 0.0;
        for (std::size_t i = 0; i < n; ++i) proj += q(i, j) * c[i];
        for (std::size_t i = 0; i < n; ++i) c[i] -= proj * q(i, j);
      }
    }
    const double nc = norm2(c);
    if (nc > 1e-6) {
      for (std::size_t i = 0; i < n; ++i) q(i, k) = c[i] / nc;
      return;
    }
  }
  throw std::logic_error("orthogonal_completion: no complement direction left");
}

}  // namespace detail

/// Best rank-k approximation U diag(sigma) V^T of `a`, computed from the
/// eigendecomposition of the smaller Gram matrix.
inline LowRankFactors top_k_svd(const DenseMatrix& a, std::size_t k) {
  const std::size_t r = a.rows(), c = a.cols();
  if (k > std::min(r, c)) throw std::invalid_argument("top_k_svd: k exceeds min(rows, cols)");
  LowRankFactors out{DenseMatrix(r, k), Vector(k), DenseMatrix(c, k)};
  if (k == 0) return out;

  const bool tall = r >= c;
  DenseMatrix gram(tall ? c : r, tall ? c : r);
  if (tall) {
    detail::view(gram).noalias() = detail::view(a).transpose() * detail::view(a);
  } else {
    detail::view(gram).noalias() = detail::view(a) * detail::view(a).transpose();
  }
  const SymmetricEigen eig = symmetric_eigen(gram);
  const double smax = std::sqrt(std::max(eig.values[0], 0.0));
  const double cutoff = smax * 1e-13 * static_cast<double>(std::max(r, c));

  DenseMatrix& small = tall ? out.v : out.u;  // eigenvectors of the Gram
  DenseMatrix& large = tall ? out.u : out.v;  // recovered via a * small / sigma
  for (std::size_t j = 0; j < k; ++j) {
    const double s = std::sqrt(std::max(eig.values[j], 0.0));
    for (std::size_t i = 0; i < small.rows(); ++i) small(i, j) = eig.vectors(i, j);
    Vector col = small.column(j);
    Vector img = tall ? matvec(a, col) : matvec(transpose(a), col);
    const double nimg = norm2(img);
    if (s > cutoff && nimg > 0.0) {
      out.sigma[j] = nimg;
      for (std::size_t i = 0; i < large.rows(); ++i) large(i, j) = img[i] / nimg;
    } else {
      out.sigma[j] = 0.0;
      detail::orthogonal_completion(large, j);
    }
  }
  // Re-sort: recomputed norms can swap near-equal neighbours.
  std::vector<std::size_t> order(k);
  for (std::size_t i = 0; i < k; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return out.sigma[x] > out.sigma[y]; });
  LowRankFactors sorted{DenseMatrix(r, k), Vector(k), DenseMatrix(c, k)};
  for (std::size_t j = 0; j < k; ++j) {
    sorted.sigma[j] = out.sigma[order[j]];
    for (std::size_t i = 0; i < r; ++i) sorted.u(i, j) = out.u(i, order[j]);
    for (std::size_t i = 0; i < c; ++i) sorted.v(i, j) = out.v(i, order[j]);
  }
  return sorted;
}

// ---------------------------------------------------------------------------
// Kronecker products (column-major vec: (A kron B) vec(X) = vec(B X A^T))

inline Vector kron_matvec(const DenseMatrix& a, const DenseMatrix& b, std::span<const double> x) {
  if (!a.is_square() || !b.is_square()) throw std::invalid_argument("kron_matvec: factors must be square");
  const auto p = static_cast<Eigen::Index>(a.rows());
  const auto q = static_cast<Eigen::Index>(b.rows());
  if (x.size() != static_cast<std::size_t>(p * q)) {
    throw std::invalid_argument("kron_matvec: vector length " + std::to_string(x.size()) + " != " +
                                std::to_string(p * q));
  }
  Vector out(x.size());
  detail::ConstColMajorMap xm(x.data(), q, p);
  detail::ColMajorMap om(out.data(), q, p);
  const Eigen::MatrixXd bx = detail::view(b) * xm;
  om.noalias() = bx * detail::view(a).transpose();
  return out;
}

inline DenseMatrix kron(const DenseMatrix& a, const DenseMatrix& b) {
  DenseMatrix k(a.rows() * b.rows(), a.cols() * b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j)
      for (std::size_t r = 0; r < b.rows(); ++r)
        for (std::size_t s = 0; s < b.cols(); ++s) k(i * b.rows() + r, j * b.cols() + s) = a(i, j) * b(r, s);
  return k;
}

}  // namespace fedfisher
