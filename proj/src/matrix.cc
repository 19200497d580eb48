#include "accent/matrix.h"

#include <algorithm>
#include <cmath>
#include <limits>

#include "accent/errors.h"

namespace accent {
namespace {

// Below this many multiply-adds the fork/join overhead dominates.
constexpr std::size_t kParallelWork = 1 << 14;

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_string() +
                         " vs " + b.shape_string());
  }
}

void require(bool ok, const Matrix& a, const Matrix& b, const char* op) {
  if (!ok) {
    throw DimensionError(std::string(op) + ": incompatible shapes " + a.shape_string() +
                         " and " + b.shape_string());
  }
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {
  if (rows == 0 || cols == 0) {
    throw DimensionError("matrix dimensions must be positive, got " +
                         std::to_string(rows) + "x" + std::to_string(cols));
  }
}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (rows == 0 || cols == 0 || data_.size() != rows * cols) {
    throw DimensionError("matrix data length " + std::to_string(data_.size()) +
                         " does not match " + std::to_string(rows) + "x" +
                         std::to_string(cols));
  }
}

Matrix Matrix::row_vector(std::span<const double> values) {
  return Matrix(1, values.size(), std::vector<double>(values.begin(), values.end()));
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

void Matrix::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

std::string Matrix::shape_string() const {
  return "(" + std::to_string(rows_) + "x" + std::to_string(cols_) + ")";
}

Matrix& Matrix::operator+=(const Matrix& o) {
  require_same_shape(*this, o, "add");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
  return *this;
}

Matrix& Matrix::operator-=(const Matrix& o) {
  require_same_shape(*this, o, "subtract");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
  return *this;
}

Matrix& Matrix::operator*=(double s) {
  for (double& v : data_) v *= s;
  return *this;
}

Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
Matrix operator*(Matrix a, double s) { return a *= s; }

Matrix matmul(const Matrix& a, const Matrix& b) {
  require(a.cols() == b.rows(), a, b, "matmul");
  const std::size_t n = a.rows(), m = b.cols(), k = a.cols();
  Matrix out(n, m);
  const double* A = a.data().data();
  const double* B = b.data().data();
  double* C = out.data().data();
  const long long rows = static_cast<long long>(n);
#pragma omp parallel for schedule(static) if (n * m * k >= kParallelWork)
  for (long long i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += A[i * k + p] * B[p * m + j];
      C[i * m + j] = acc;
    }
  }
  return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  require(a.rows() == b.rows(), a, b, "matmul_tn");
  const std::size_t n = a.cols(), m = b.cols(), k = a.rows();
  Matrix out(n, m);
  const double* A = a.data().data();
  const double* B = b.data().data();
  double* C = out.data().data();
  const long long rows = static_cast<long long>(n);
#pragma omp parallel for schedule(static) if (n * m * k >= kParallelWork)
  for (long long i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += A[p * n + i] * B[p * m + j];
      C[i * m + j] = acc;
    }
  }
  return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  require(a.cols() == b.cols(), a, b, "matmul_nt");
  const std::size_t n = a.rows(), m = b.rows(), k = a.cols();
  Matrix out(n, m);
  const double* A = a.data().data();
  const double* B = b.data().data();
  double* C = out.data().data();
  const long long rows = static_cast<long long>(n);
#pragma omp parallel for schedule(static) if (n * m * k >= kParallelWork)
  for (long long i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += A[i * k + p] * B[j * k + p];
      C[i * m + j] = acc;
    }
  }
  return out;
}

namespace serial {

Matrix matmul(const Matrix& a, const Matrix& b) {
  require(a.cols() == b.rows(), a, b, "matmul");
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < a.cols(); ++p) acc += a(i, p) * b(p, j);
      out(i, j) = acc;
    }
  return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  return serial::matmul(transpose(a), b);
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  return serial::matmul(a, transpose(b));
}

}  // namespace serial

Matrix transpose(const Matrix& m) {
  Matrix t(m.cols(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) t(j, i) = m(i, j);
  return t;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "hadamard");
  Matrix out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] *= b.data()[i];
  return out;
}

Matrix add_row_broadcast(Matrix m, const Matrix& row) {
  require(row.rows() == 1 && row.cols() == m.cols(), m, row, "add_row_broadcast");
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) m(i, j) += row(0, j);
  return m;
}

Matrix mul_row_broadcast(Matrix m, const Matrix& row) {
  require(row.rows() == 1 && row.cols() == m.cols(), m, row, "mul_row_broadcast");
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) m(i, j) *= row(0, j);
  return m;
}

Matrix column_sums(const Matrix& m) {
  Matrix out(1, m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(0, j) += m(i, j);
  return out;
}

double sum_all(const Matrix& m) {
  double s = 0.0;
  for (double v : m.data()) s += v;
  return s;
}

double dot_all(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "dot_all");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.data()[i] * b.data()[i];
  return s;
}

Matrix row_softmax(const Matrix& m) {
  Matrix out = m;
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = out.row(i);
    const double mx = *std::max_element(r.begin(), r.end());
    double total = 0.0;
    for (double& v : r) {
      v = std::exp(v - mx);
      total += v;
    }
    for (double& v : r) v /= total;
  }
  return out;
}

Matrix row_log_softmax(const Matrix& m) {
  Matrix out = m;
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = out.row(i);
    const double lse = log_sum_exp(r);
    for (double& v : r) v -= lse;
  }
  return out;
}

Matrix row_softmax_backward(const Matrix& softmax_out, const Matrix& grad_out) {
  require_same_shape(softmax_out, grad_out, "row_softmax_backward");
  Matrix g(softmax_out.rows(), softmax_out.cols());
  for (std::size_t i = 0; i < g.rows(); ++i) {
    double inner = 0.0;
    for (std::size_t j = 0; j < g.cols(); ++j) inner += grad_out(i, j) * softmax_out(i, j);
    for (std::size_t j = 0; j < g.cols(); ++j)
      g(i, j) = softmax_out(i, j) * (grad_out(i, j) - inner);
  }
  return g;
}

Matrix row_log_softmax_backward(const Matrix& log_softmax_out, const Matrix& grad_out) {
  require_same_shape(log_softmax_out, grad_out, "row_log_softmax_backward");
  Matrix g(grad_out.rows(), grad_out.cols());
  for (std::size_t i = 0; i < g.rows(); ++i) {
    double total = 0.0;
    for (std::size_t j = 0; j < g.cols(); ++j) total += grad_out(i, j);
    for (std::size_t j = 0; j < g.cols(); ++j)
      g(i, j) = grad_out(i, j) - std::exp(log_softmax_out(i, j)) * total;
  }
  return g;
}

double log_add_exp(double a, double b) {
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double mx = std::max(a, b);
  return mx + std::log1p(std::exp(-std::abs(a - b)));
}

double log_sum_exp(std::span<const double> v) {
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  if (v.empty()) return kNegInf;
  const double mx = *std::max_element(v.begin(), v.end());
  if (mx == kNegInf) return kNegInf;
  double total = 0.0;
  for (double x : v) total += std::exp(x - mx);
  return mx + std::log(total);
}

bool all_finite(const Matrix& m) {
  return std::all_of(m.data().begin(), m.data().end(),
                     [](double v) { return std::isfinite(v); });
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "max_abs_diff");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
  return worst;
}

}  // namespace accent
