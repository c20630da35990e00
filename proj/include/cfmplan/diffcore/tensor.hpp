#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "cfmplan/errors.hpp"

namespace cfmplan::diff {

/// Dense row-major matrix of doubles. Batches are a leading row dimension.
struct Tensor2 {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Tensor2() = default;
  Tensor2(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
  Tensor2(std::size_t r, std::size_t c, std::vector<double> values)
      : rows(r), cols(c), data(std::move(values)) {
    if (data.size() != rows * cols) {
      throw DimensionError("Tensor2: " + std::to_string(data.size()) + " values for shape " +
                           shape_string(r, c));
    }
  }
  Tensor2(std::size_t r, std::size_t c, std::initializer_list<double> values)
      : Tensor2(r, c, std::vector<double>(values)) {}

  static Tensor2 row_vector(std::span<const double> v) {
    return Tensor2(1, v.size(), std::vector<double>(v.begin(), v.end()));
  }

  [[nodiscard]] std::size_t size() const { return data.size(); }
  [[nodiscard]] bool empty() const { return data.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  [[nodiscard]] std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  [[nodiscard]] bool same_shape(const Tensor2& o) const { return rows == o.rows && cols == o.cols; }
  [[nodiscard]] std::string shape() const { return shape_string(rows, cols); }

  [[nodiscard]] bool all_finite() const {
    return std::all_of(data.begin(), data.end(), [](double x) { return std::isfinite(x); });
  }

  void fill(double v) { std::fill(data.begin(), data.end(), v); }

  static std::string shape_string(std::size_t r, std::size_t c) {
    return "(" + std::to_string(r) + "x" + std::to_string(c) + ")";
  }

  friend bool operator==(const Tensor2&, const Tensor2&) = default;
};

inline void require_same_shape(const Tensor2& a, const Tensor2& b, const char* what) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(what) + ": shape mismatch " + a.shape() + " vs " + b.shape());
  }
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double squared_norm(std::span<const double> a) { return dot(a, a); }

// out += a * b  for (n x k) * (k x m)
inline void gemm_acc(const double* a, const double* b, double* out, std::size_t n, std::size_t k,
                     std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    double* orow = out + i * m;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
}

// out += a^T * b  for a (k x n), b (k x m) -> (n x m)
inline void gemm_at_acc(const double* a, const double* b, double* out, std::size_t k, std::size_t n,
                        std::size_t m) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a + p * n;
    const double* brow = b + p * m;
    for (std::size_t i = 0; i < n; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* orow = out + i * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
}

// out += a * b^T  for a (n x k), b (m x k) -> (n x m)
inline void gemm_bt_acc(const double* a, const double* b, double* out, std::size_t n, std::size_t k,
                        std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* arow = a + i * k;
    double* orow = out + i * m;
    for (std::size_t j = 0; j < m; ++j) {
      const double* brow = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      orow[j] += s;
    }
  }
}

inline Tensor2 matmul(const Tensor2& a, const Tensor2& b) {
  if (a.cols != b.rows) throw DimensionError("matmul: " + a.shape() + " * " + b.shape());
  Tensor2 out(a.rows, b.cols);
  gemm_acc(a.data.data(), b.data.data(), out.data.data(), a.rows, a.cols, b.cols);
  return out;
}

}  // namespace cfmplan::diff
