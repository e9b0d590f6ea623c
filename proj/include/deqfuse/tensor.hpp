#ifndef DEQFUSE_TENSOR_HPP
#define DEQFUSE_TENSOR_HPP

#include <cstddef>
#include <initializer_list>
#include <vector>

#include "deqfuse/errors.hpp"

namespace deqfuse {

/// Dense row-major matrix of doubles. The only array type in the project;
/// vectors are 1xN or Nx1, batched features are batch x d.
class Tensor2 {
 public:
  Tensor2() = default;
  Tensor2(std::size_t rows, std::size_t cols)
      : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

  static Tensor2 zeros(std::size_t rows, std::size_t cols) { return Tensor2(rows, cols); }
  static Tensor2 full(std::size_t rows, std::size_t cols, double value);
  static Tensor2 identity(std::size_t n);
  static Tensor2 from_rows(std::initializer_list<std::initializer_list<double>> rows);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }
  double& operator[](std::size_t k) { return data_[k]; }
  double operator[](std::size_t k) const { return data_[k]; }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }

  bool same_shape(const Tensor2& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  bool all_finite() const noexcept;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

std::string shape_str(const Tensor2& t);
void require_same_shape(const Tensor2& a, const Tensor2& b, const char* where);

// Elementwise and matrix algebra. All functions are pure; shape mismatches
// throw ShapeError naming both shapes.
Tensor2 matmul(const Tensor2& a, const Tensor2& b);
Tensor2 transpose(const Tensor2& a);
Tensor2 add(const Tensor2& a, const Tensor2& b);
Tensor2 sub(const Tensor2& a, const Tensor2& b);
Tensor2 hadamard(const Tensor2& a, const Tensor2& b);
Tensor2 scaled(const Tensor2& a, double s);
void add_in_place(Tensor2& a, const Tensor2& b);
void axpy_in_place(Tensor2& y, double alpha, const Tensor2& x);

/// y(i, :) = x(i, :) + row(0, :) for a 1 x cols row vector.
Tensor2 add_row_broadcast(const Tensor2& x, const Tensor2& row);
/// 1 x cols vector of column sums (bias-gradient reduction).
Tensor2 col_sums(const Tensor2& x);

double dot(const Tensor2& a, const Tensor2& b);
double frobenius_norm(const Tensor2& a);
double max_abs(const Tensor2& a);
double max_abs_diff(const Tensor2& a, const Tensor2& b);

/// ||z_new - z_old||_F / ||z_old||_F. A zero denominator returns the
/// numerator norm so the first step from a zero state is well defined.
double rel_diff_norm(const Tensor2& z_new, const Tensor2& z_old);

/// Minimizes ||A x - b||^2 + lambda ||x||^2 through the normal equations
/// (A^T A + lambda I) x = A^T b, solved by Cholesky. b may carry multiple
/// right-hand-side columns. A singular system with lambda = 0 throws
/// NumericError suggesting lambda > 0.
Tensor2 ridge_lstsq(const Tensor2& a, const Tensor2& b, double lambda);

}  // namespace deqfuse

#endif  // DEQFUSE_TENSOR_HPP
