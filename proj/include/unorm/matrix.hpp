#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <string>
#include <vector>

namespace unorm {

using Vector = std::vector<double>;

// Dense row-major matrix of doubles. Rows are the folded sample*token axis,
// columns are channels. All accumulation is done in double precision.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const double& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  bool all_finite() const;
  bool same_shape(const Matrix& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

enum class ReduceKind { Mean, QuadraticMean, Variance };

// Standard matrix product. Throws std::invalid_argument on inner-dimension
// mismatch.
Matrix matmul(const Matrix& a, const Matrix& b);

// Per-channel reduction over rows. QuadraticMean is (1/B) sum x^2 (no square
// root); Variance is the population (divide-by-B) variance.
Vector column_reduce(const Matrix& x, ReduceKind kind);

// Central-difference gradient (f(x+h e) - f(x-h e)) / (2h) per element.
// Throws if f returns a non-finite value at any probe point.
Matrix finite_difference_gradient(const std::function<double(const Matrix&)>& f,
                                  const Matrix& x, double h);

double max_abs_diff(const Matrix& a, const Matrix& b);
double max_abs_diff(const Vector& a, const Vector& b);

// CSV layout: one header line "rows,cols", then one line per row with
// comma-separated values printed to full round-trip precision.
void save_csv(const Matrix& m, const std::string& path);
Matrix load_matrix_csv(const std::string& path);

}  // namespace unorm
