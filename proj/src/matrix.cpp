#include "unorm/matrix.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace unorm {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {
  if (rows == 0 || cols == 0) {
    throw std::invalid_argument("Matrix: rows and cols must be >= 1");
  }
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  if (rows.size() == 0 || rows.begin()->size() == 0) {
    throw std::invalid_argument("Matrix::from_rows: empty initializer");
  }
  Matrix m(rows.size(), rows.begin()->size());
  std::size_t r = 0;
  for (const auto& row : rows) {
    if (row.size() != m.cols()) {
      throw std::invalid_argument("Matrix::from_rows: ragged rows");
    }
    std::size_t c = 0;
    for (double v : row) m(r, c++) = v;
    ++r;
  }
  return m;
}

bool Matrix::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: inner dimensions mismatch (" +
                                std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + ")");
  }
  Matrix out(a.rows(), b.cols(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      for (std::size_t j = 0; j < b.cols(); ++j) {
        out(i, j) += aik * b(k, j);
      }
    }
  }
  return out;
}

Vector column_reduce(const Matrix& x, ReduceKind kind) {
  if (x.rows() == 0) {
    throw std::invalid_argument("column_reduce: zero rows");
  }
  const std::size_t b = x.rows();
  const std::size_t c = x.cols();
  Vector out(c, 0.0);
  switch (kind) {
    case ReduceKind::Mean: {
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j] += x(i, j);
      for (std::size_t j = 0; j < c; ++j) out[j] /= static_cast<double>(b);
      break;
    }
    case ReduceKind::QuadraticMean: {
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j] += x(i, j) * x(i, j);
      for (std::size_t j = 0; j < c; ++j) out[j] /= static_cast<double>(b);
      break;
    }
    case ReduceKind::Variance: {
      Vector mean = column_reduce(x, ReduceKind::Mean);
      for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
          const double d = x(i, j) - mean[j];
          out[j] += d * d;
        }
      }
      for (std::size_t j = 0; j < c; ++j) out[j] /= static_cast<double>(b);
      break;
    }
  }
  return out;
}

Matrix finite_difference_gradient(const std::function<double(const Matrix&)>& f,
                                  const Matrix& x, double h) {
  if (!(h > 0.0)) {
    throw std::invalid_argument("finite_difference_gradient: h must be > 0");
  }
  Matrix grad(x.rows(), x.cols(), 0.0);
  Matrix probe = x;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < x.cols(); ++j) {
      const double orig = probe(i, j);
      probe(i, j) = orig + h;
      const double fp = f(probe);
      probe(i, j) = orig - h;
      const double fm = f(probe);
      probe(i, j) = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        throw std::runtime_error("finite_difference_gradient: non-finite function value");
      }
      grad(i, j) = (fp - fm) / (2.0 * h);
    }
  }
  return grad;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument("max_abs_diff: shape mismatch");
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::fabs(a.values()[i] - b.values()[i]));
  }
  return worst;
}

double max_abs_diff(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("max_abs_diff: length mismatch");
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::fabs(a[i] - b[i]));
  }
  return worst;
}

namespace {

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void save_csv(const Matrix& m, const std::string& path) {
  std::ofstream out(path);
  if (!out) {
    throw std::runtime_error("save_csv: cannot open " + path);
  }
  out << m.rows() << "," << m.cols() << "\n";
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) {
      if (j) out << ",";
      out << format_double(m(i, j));
    }
    out << "\n";
  }
}

Matrix load_matrix_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw std::runtime_error("load_matrix_csv: cannot open " + path);
  }
  std::string line;
  if (!std::getline(in, line)) {
    throw std::runtime_error("load_matrix_csv: missing header");
  }
  std::size_t rows = 0, cols = 0;
  {
    std::istringstream hs(line);
    char comma = 0;
    if (!(hs >> rows >> comma >> cols) || comma != ',') {
      throw std::runtime_error("load_matrix_csv: bad header '" + line + "'");
    }
  }
  Matrix m(rows, cols, 0.0);
  for (std::size_t i = 0; i < rows; ++i) {
    if (!std::getline(in, line)) {
      throw std::runtime_error("load_matrix_csv: truncated file");
    }
    std::istringstream ls(line);
    std::string cell;
    for (std::size_t j = 0; j < cols; ++j) {
      if (!std::getline(ls, cell, ',')) {
        throw std::runtime_error("load_matrix_csv: short row");
      }
      m(i, j) = std::stod(cell);
    }
  }
  return m;
}

}  // namespace unorm
