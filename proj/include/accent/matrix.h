#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace accent {

/// Dense row-major matrix of doubles. A default-constructed matrix is empty
/// (0x0) and only serves as a placeholder; every sized matrix has at least
/// one row and one column.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix row_vector(std::span<const double> values);
  static Matrix identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  void fill(double v);
  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
  std::string shape_string() const;

  Matrix& operator+=(const Matrix& o);
  Matrix& operator-=(const Matrix& o);
  Matrix& operator*=(double s);

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix operator+(Matrix a, const Matrix& b);
Matrix operator-(Matrix a, const Matrix& b);
Matrix operator*(Matrix a, double s);

// Parallel kernels. Each output entry is accumulated serially in a fixed
// order, so results are bit-identical to the serial references regardless
// of thread count.
Matrix matmul(const Matrix& a, const Matrix& b);
/// a^T b
Matrix matmul_tn(const Matrix& a, const Matrix& b);
/// a b^T
Matrix matmul_nt(const Matrix& a, const Matrix& b);

namespace serial {
Matrix matmul(const Matrix& a, const Matrix& b);
Matrix matmul_tn(const Matrix& a, const Matrix& b);
Matrix matmul_nt(const Matrix& a, const Matrix& b);
}  // namespace serial

Matrix transpose(const Matrix& m);
Matrix hadamard(const Matrix& a, const Matrix& b);
/// Adds a 1xC row to every row of m.
Matrix add_row_broadcast(Matrix m, const Matrix& row);
/// Multiplies every row of m elementwise by a 1xC row.
Matrix mul_row_broadcast(Matrix m, const Matrix& row);
/// 1xC column sums.
Matrix column_sums(const Matrix& m);
double sum_all(const Matrix& m);
double dot_all(const Matrix& a, const Matrix& b);

Matrix row_softmax(const Matrix& m);
Matrix row_log_softmax(const Matrix& m);
/// Gradient wrt logits given the gradient wrt softmax output.
Matrix row_softmax_backward(const Matrix& softmax_out, const Matrix& grad_out);
/// Gradient wrt logits given the gradient wrt log-softmax output.
Matrix row_log_softmax_backward(const Matrix& log_softmax_out, const Matrix& grad_out);

double log_add_exp(double a, double b);
double log_sum_exp(std::span<const double> v);

bool all_finite(const Matrix& m);
double max_abs_diff(const Matrix& a, const Matrix& b);

}  // namespace accent
