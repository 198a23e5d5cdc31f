// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"

namespace moocembed {

using Shape = std::vector<std::size_t>;

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major array of doubles with rank 1 to 3.
///
/// The flat index of (i, j, k) in a d1 x d2 x d3 array is (i * d2 + j) * d3 + k.
class Array {
 public:
  Array() = default;

  explicit Array(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.assign(shape_size(shape_), fill);
  }

  Array(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (data_.size() != shape_size(shape_))
      throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                       to_string(shape_));
  }

  static Array vector(std::initializer_list<double> values) {
    return Array({values.size()}, std::vector<double>(values));
  }

  static Array matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Array({r, c}, std::move(data));
  }

  static Array identity(std::size_t n) {
    Array a({n, n});
    for (std::size_t i = 0; i < n; ++i) a(i, i) = 1.0;
    return a;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  double* raw() noexcept { return data_.data(); }
  const double* raw() const noexcept { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  const double& operator[](std::size_t i) const { return data_[i]; }

  double& operator()(std::size_t i) { return data_[i]; }
  const double& operator()(std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  const double& operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  double& operator()(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  const double& operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  Array reshaped(Shape shape) const& {
    Array out = *this;
    return std::move(out).reshaped(std::move(shape));
  }
  Array reshaped(Shape shape) && {
    check_shape(shape);
    if (shape_size(shape) != data_.size())
      throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    shape_ = std::move(shape);
    return std::move(*this);
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Array&, const Array&) = default;

 private:
  static void check_shape(const Shape& shape) {
    if (shape.empty() || shape.size() > 3)
      throw ShapeError("array rank must be 1..3, got " + std::to_string(shape.size()));
    for (auto d : shape)
      if (d == 0) throw ShapeError("zero dimension in shape " + to_string(shape));
  }

  Shape shape_;
  std::vector<double> data_;
};

namespace detail {

inline void require_rank(const Array& a, std::size_t r, const char* what) {
  if (a.rank() != r)
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(r) + ", got " +
                     to_string(a.shape()));
}

}  // namespace detail

/// c[m x p] = a[m x n] * b[n x p]
inline Array matmul(const Array& a, const Array& b) {
  detail::require_rank(a, 2, "matmul lhs");
  detail::require_rank(b, 2, "matmul rhs");
  const std::size_t m = a.dim(0), n = a.dim(1), p = b.dim(1);
  if (b.dim(0) != n)
    throw ShapeError("matmul: inner dimensions differ, " + to_string(a.shape()) + " * " +
                     to_string(b.shape()));
  Array c({m, p});
  const double* pa = a.raw();
  const double* pb = b.raw();
  double* pc = c.raw();
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = pc + i * p;
    for (std::size_t k = 0; k < n; ++k) {
      const double aik = pa[i * n + k];
      if (aik == 0.0) continue;
      const double* bk = pb + k * p;
      for (std::size_t j = 0; j < p; ++j) ci[j] += aik * bk[j];
    }
  }
  return c;
}

/// c[n x p] = a[m x n]^T * b[m x p]
inline Array matmul_tn(const Array& a, const Array& b) {
  detail::require_rank(a, 2, "matmul_tn lhs");
  detail::require_rank(b, 2, "matmul_tn rhs");
  const std::size_t m = a.dim(0), n = a.dim(1), p = b.dim(1);
  if (b.dim(0) != m)
    throw ShapeError("matmul_tn: row counts differ, " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  Array c({n, p});
  const double* pa = a.raw();
  const double* pb = b.raw();
  double* pc = c.raw();
  for (std::size_t r = 0; r < m; ++r) {
    const double* ar = pa + r * n;
    const double* br = pb + r * p;
    for (std::size_t i = 0; i < n; ++i) {
      const double v = ar[i];
      if (v == 0.0) continue;
      double* ci = pc + i * p;
      for (std::size_t j = 0; j < p; ++j) ci[j] += v * br[j];
    }
  }
  return c;
}

/// c[m x p] = a[m x n] * b[p x n]^T
inline Array matmul_nt(const Array& a, const Array& b) {
  detail::require_rank(a, 2, "matmul_nt lhs");
  detail::require_rank(b, 2, "matmul_nt rhs");
  const std::size_t m = a.dim(0), n = a.dim(1), p = b.dim(0);
  if (b.dim(1) != n)
    throw ShapeError("matmul_nt: column counts differ, " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  Array c({m, p});
  const double* pa = a.raw();
  const double* pb = b.raw();
  double* pc = c.raw();
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = pa + i * n;
    for (std::size_t j = 0; j < p; ++j) {
      const double* bj = pb + j * n;
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k) s += ai[k] * bj[k];
      pc[i * p + j] = s;
    }
  }
  return c;
}

inline Array transpose(const Array& a) {
  detail::require_rank(a, 2, "transpose");
  Array t({a.dim(1), a.dim(0)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < a.dim(1); ++j) t(j, i) = a(i, j);
  return t;
}

inline void add_inplace(Array& dst, const Array& src) {
  if (dst.size() != src.size())
    throw ShapeError("add: " + to_string(dst.shape()) + " vs " + to_string(src.shape()));
  double* d = dst.raw();
  const double* s = src.raw();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

inline double sum(const Array& a) { return std::accumulate(a.data().begin(), a.data().end(), 0.0); }

inline double max_abs(const Array& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

/// Result of a symmetric eigendecomposition; eigenvectors are the columns of `vectors`.
struct EigenResult {
  Array values;
  Array vectors;
};

/// Cyclic Jacobi eigendecomposition of a symmetric matrix, eigenvalues descending.
///
/// Throws ValidationError if `m` is not symmetric within `symmetry_tol`, NumericError if
/// the off-diagonal mass has not vanished after `max_sweeps` sweeps.
inline EigenResult sym_eig(const Array& m, double symmetry_tol = 1e-9, int max_sweeps = 100) {
  detail::require_rank(m, 2, "sym_eig");
  const std::size_t n = m.dim(0);
  if (m.dim(1) != n) throw ShapeError("sym_eig: matrix not square " + to_string(m.shape()));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (std::abs(m(i, j) - m(j, i)) > symmetry_tol)
        throw ValidationError("sym_eig: matrix not symmetric at (" + std::to_string(i) + "," +
                              std::to_string(j) + ")");

  Array a = m;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) a(i, j) = a(j, i) = 0.5 * (m(i, j) + m(j, i));
  Array v = Array::identity(n);

  auto off_norm = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) s += a(i, j) * a(i, j);
    return std::sqrt(2.0 * s);
  };
  double scale = 0.0;
  for (double x : a.data()) scale += x * x;
  scale = std::sqrt(scale);

  bool converged = n < 2 || off_norm() <= 1e-300;
  for (int sweep = 0; sweep < max_sweeps && !converged; ++sweep) {
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        // Rotation angle from the stable tan formulation.
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = a(q, p) = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
    converged = off_norm() <= 1e-14 * std::max(scale, 1e-300);
  }
  if (!converged) throw NumericError("sym_eig: Jacobi iteration did not converge");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return a(i, i) > a(j, j); });
  EigenResult r{Array({n}), Array({n, n})};
  for (std::size_t c = 0; c < n; ++c) {
    r.values(c) = a(order[c], order[c]);
    for (std::size_t k = 0; k < n; ++k) r.vectors(k, c) = v(k, order[c]);
  }
  return r;
}

}  // namespace moocembed
