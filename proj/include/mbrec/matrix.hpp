#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "mbrec/errors.hpp"

namespace mbrec {

/// Dense row-major matrix. Rows are node embeddings.
template <typename Real>
class Matrix {
 public:
  using value_type = Real;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, Real fill = Real{0})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  Real& operator()(std::size_t r, std::size_t c) {
    assert(r < rows_ && c < cols_);
    return data_[r * cols_ + c];
  }
  Real operator()(std::size_t r, std::size_t c) const {
    assert(r < rows_ && c < cols_);
    return data_[r * cols_ + c];
  }

  std::span<Real> row(std::size_t r) {
    assert(r < rows_);
    return {data_.data() + r * cols_, cols_};
  }
  std::span<const Real> row(std::size_t r) const {
    assert(r < rows_);
    return {data_.data() + r * cols_, cols_};
  }

  std::span<Real> values() noexcept { return data_; }
  std::span<const Real> values() const noexcept { return data_; }

  void fill(Real v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Matrix& o) const noexcept {
    return rows_ == o.rows_ && cols_ == o.cols_;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<Real> data_;
};

/// User and item embedding matrices that travel together.
template <typename Real>
struct NodeEmbeddings {
  Matrix<Real> users;
  Matrix<Real> items;

  std::size_t dim() const noexcept { return users.cols(); }

  friend bool operator==(const NodeEmbeddings&, const NodeEmbeddings&) = default;
};

template <typename Real>
Real dot(std::span<const Real> a, std::span<const Real> b) {
  assert(a.size() == b.size());
  Real acc{0};
  for (std::size_t k = 0; k < a.size(); ++k) acc += a[k] * b[k];
  return acc;
}

/// y += alpha * x
template <typename Real>
void axpy(Real alpha, std::span<const Real> x, std::span<Real> y) {
  assert(x.size() == y.size());
  for (std::size_t k = 0; k < x.size(); ++k) y[k] += alpha * x[k];
}

template <typename Real>
void add_into(Matrix<Real>& dst, const Matrix<Real>& src) {
  if (!dst.same_shape(src)) throw ContractViolation("add_into: shape mismatch");
  auto d = dst.values();
  auto s = src.values();
  for (std::size_t k = 0; k < d.size(); ++k) d[k] += s[k];
}

template <typename Real>
void add_into(NodeEmbeddings<Real>& dst, const NodeEmbeddings<Real>& src) {
  add_into(dst.users, src.users);
  add_into(dst.items, src.items);
}

template <typename To, typename From>
Matrix<To> matrix_cast(const Matrix<From>& m) {
  Matrix<To> out(m.rows(), m.cols());
  std::transform(m.values().begin(), m.values().end(), out.values().begin(),
                 [](From v) { return static_cast<To>(v); });
  return out;
}

template <typename Real>
bool all_finite(const Matrix<Real>& m) {
  return std::all_of(m.values().begin(), m.values().end(),
                     [](Real v) { return std::isfinite(v); });
}

}  // namespace mbrec
