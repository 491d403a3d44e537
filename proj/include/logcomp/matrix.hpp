#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "logcomp/error.hpp"

namespace logcomp {

/// Buffers start on Eigen's widest SIMD boundary, so vectorized kernels peel
/// the same way on every run and sums are bit-reproducible.
using AlignedVector = std::vector<double, Eigen::aligned_allocator<double>>;

/// Dense row-major matrix of doubles. Vectors are 1×n.
class Matrix {
 public:
  using EigenRowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Map = Eigen::Map<EigenRowMajor>;
  using ConstMap = Eigen::Map<const EigenRowMajor>;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, const std::vector<double>& data)
      : rows_(rows), cols_(cols), data_(data.begin(), data.end()) {
    require(data_.size() == rows_ * cols_, "matrix buffer does not match shape");
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  AlignedVector& data() noexcept { return data_; }
  const AlignedVector& data() const noexcept { return data_; }

  Map eigen() { return Map(data_.data(), static_cast<Eigen::Index>(rows_), static_cast<Eigen::Index>(cols_)); }
  ConstMap eigen() const {
    return ConstMap(data_.data(), static_cast<Eigen::Index>(rows_), static_cast<Eigen::Index>(cols_));
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  std::string shape_string() const { return std::to_string(rows_) + "x" + std::to_string(cols_); }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  AlignedVector data_;
};

/// Row-wise standardization followed by a shared affine map. Writes the
/// standardized values and per-row inverse deviations when requested (backward
/// pass of the differentiable version needs them).
inline Matrix layernorm_rows(const Matrix& x, std::span<const double> gain, std::span<const double> bias,
                             double eps, Matrix* normalized = nullptr, std::vector<double>* inv_std = nullptr) {
  const std::size_t n = x.cols();
  require(gain.size() == n && bias.size() == n,
          "layernorm: gain/bias length " + std::to_string(gain.size()) + " != " + std::to_string(n));
  Matrix out(x.rows(), n);
  if (normalized) *normalized = Matrix(x.rows(), n);
  if (inv_std) inv_std->assign(x.rows(), 0.0);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    double mean = 0.0;
    for (double v : in) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : in) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    const double rstd = 1.0 / std::sqrt(var + eps);
    auto o = out.row(r);
    for (std::size_t c = 0; c < n; ++c) {
      const double xhat = (in[c] - mean) * rstd;
      if (normalized) (*normalized)(r, c) = xhat;
      o[c] = xhat * gain[c] + bias[c];
    }
    if (inv_std) (*inv_std)[r] = rstd;
  }
  return out;
}

}  // namespace logcomp
