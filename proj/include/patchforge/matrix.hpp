#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace patchforge {

using Vector = std::vector<double>;

/// Dense row-major matrix of doubles. A row vector is a 1 x n matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix identity(std::size_t n);
  static Matrix row_vector(std::span<const double> values);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  void fill(double value);
  bool same_shape(const Matrix& other) const { return rows_ == other.rows_ && cols_ == other.cols_; }
  std::string shape() const;

  bool operator==(const Matrix& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// Gaussian-error linear unit x * Phi(x), with Phi evaluated through erf.
double gelu(double x);
/// d/dx gelu(x) = Phi(x) + x * phi(x).
double gelu_derivative(double x);
Matrix gelu(const Matrix& x);

/// x * W + b for a row vector x. Throws ShapeError on mismatch.
Vector affine(std::span<const double> x, const Matrix& w, std::span<const double> b);

Matrix matmul(const Matrix& a, const Matrix& b);
/// a * b^T.
Matrix matmul_nt(const Matrix& a, const Matrix& b);
/// a^T * b.
Matrix matmul_tn(const Matrix& a, const Matrix& b);

/// Adds `bias` (1 x cols) to every row of `m` in place.
void add_row_inplace(Matrix& m, std::span<const double> bias);
void add_inplace(Matrix& a, const Matrix& b);
void axpy(double alpha, std::span<const double> x, std::span<double> y);
double dot(std::span<const double> a, std::span<const double> b);

/// Row-wise layer normalization with gain and bias.
Matrix layer_norm_rows(const Matrix& x, std::span<const double> gain, std::span<const double> bias,
                       double eps);

bool all_finite(std::span<const double> values);

/// Index of the largest entry; ties resolve to the lowest index.
std::size_t argmax(std::span<const double> values);

}  // namespace patchforge
