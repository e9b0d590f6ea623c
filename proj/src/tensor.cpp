#include "deqfuse/tensor.hpp"

#include <cmath>
#include <cstdlib>
#include <sstream>

namespace deqfuse {

Tensor2 Tensor2::full(std::size_t rows, std::size_t cols, double value) {
  Tensor2 t(rows, cols);
  for (std::size_t k = 0; k < t.size(); ++k) t[k] = value;
  return t;
}

Tensor2 Tensor2::identity(std::size_t n) {
  Tensor2 t(n, n);
  for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
  return t;
}

Tensor2 Tensor2::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  Tensor2 t(r, c);
  std::size_t i = 0;
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("from_rows: ragged initializer");
    std::size_t j = 0;
    for (double v : row) t(i, j++) = v;
    ++i;
  }
  return t;
}

bool Tensor2::all_finite() const noexcept {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

std::string shape_str(const Tensor2& t) {
  std::ostringstream os;
  os << t.rows() << "x" << t.cols();
  return os.str();
}

void require_same_shape(const Tensor2& a, const Tensor2& b, const char* where) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(where) + ": shape mismatch " + shape_str(a) +
                     " vs " + shape_str(b));
  }
}

Tensor2 matmul(const Tensor2& a, const Tensor2& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a) + " x " +
                     shape_str(b));
  }
  Tensor2 out(a.rows(), b.cols());
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  for (std::size_t i = 0; i < n; ++i) {
    double* out_row = out.data() + i * m;
    const double* a_row = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a_row[p];
      if (av == 0.0) continue;
      const double* b_row = b.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) out_row[j] += av * b_row[j];
    }
  }
  return out;
}

Tensor2 transpose(const Tensor2& a) {
  Tensor2 out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

Tensor2 add(const Tensor2& a, const Tensor2& b) {
  require_same_shape(a, b, "add");
  Tensor2 out = a;
  for (std::size_t k = 0; k < out.size(); ++k) out[k] += b[k];
  return out;
}

Tensor2 sub(const Tensor2& a, const Tensor2& b) {
  require_same_shape(a, b, "sub");
  Tensor2 out = a;
  for (std::size_t k = 0; k < out.size(); ++k) out[k] -= b[k];
  return out;
}

Tensor2 hadamard(const Tensor2& a, const Tensor2& b) {
  require_same_shape(a, b, "hadamard");
  Tensor2 out = a;
  for (std::size_t k = 0; k < out.size(); ++k) out[k] *= b[k];
  return out;
}

Tensor2 scaled(const Tensor2& a, double s) {
  Tensor2 out = a;
  for (std::size_t k = 0; k < out.size(); ++k) out[k] *= s;
  return out;
}

void add_in_place(Tensor2& a, const Tensor2& b) {
  require_same_shape(a, b, "add_in_place");
  for (std::size_t k = 0; k < a.size(); ++k) a[k] += b[k];
}

void axpy_in_place(Tensor2& y, double alpha, const Tensor2& x) {
  require_same_shape(y, x, "axpy_in_place");
  for (std::size_t k = 0; k < y.size(); ++k) y[k] += alpha * x[k];
}

Tensor2 add_row_broadcast(const Tensor2& x, const Tensor2& row) {
  if (row.rows() != 1 || row.cols() != x.cols()) {
    throw ShapeError("add_row_broadcast: need 1x" + std::to_string(x.cols()) +
                     " row, got " + shape_str(row));
  }
  Tensor2 out = x;
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) += row(0, j);
  return out;
}

Tensor2 col_sums(const Tensor2& x) {
  Tensor2 out(1, x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) out(0, j) += x(i, j);
  return out;
}

double dot(const Tensor2& a, const Tensor2& b) {
  require_same_shape(a, b, "dot");
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
  return s;
}

double frobenius_norm(const Tensor2& a) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * a[k];
  return std::sqrt(s);
}

double max_abs(const Tensor2& a) {
  double m = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, std::fabs(a[k]));
  return m;
}

double max_abs_diff(const Tensor2& a, const Tensor2& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, std::fabs(a[k] - b[k]));
  return m;
}

double rel_diff_norm(const Tensor2& z_new, const Tensor2& z_old) {
  require_same_shape(z_new, z_old, "rel_diff_norm");
  double num = 0.0, den = 0.0;
  for (std::size_t k = 0; k < z_new.size(); ++k) {
    const double d = z_new[k] - z_old[k];
    num += d * d;
    den += z_old[k] * z_old[k];
  }
  num = std::sqrt(num);
  den = std::sqrt(den);
  return den > 0.0 ? num / den : num;
}

namespace {

// In-place Cholesky solve of the SPD system M x = rhs (rhs may have many
// columns). Returns false when a pivot falls below the relative floor,
// which catches singular systems that rounding keeps barely positive.
bool cholesky_solve(Tensor2& m, Tensor2& rhs) {
  const std::size_t n = m.rows();
  double diag_scale = 0.0;
  for (std::size_t j = 0; j < n; ++j) diag_scale = std::max(diag_scale, std::fabs(m(j, j)));
  const double pivot_floor = 1e-14 * diag_scale;
  for (std::size_t j = 0; j < n; ++j) {
    double d = m(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= m(j, k) * m(j, k);
    if (!(d > pivot_floor)) return false;
    const double ljj = std::sqrt(d);
    m(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = m(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= m(i, k) * m(j, k);
      m(i, j) = s / ljj;
    }
  }
  const std::size_t nrhs = rhs.cols();
  for (std::size_t c = 0; c < nrhs; ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = rhs(i, c);
      for (std::size_t k = 0; k < i; ++k) s -= m(i, k) * rhs(k, c);
      rhs(i, c) = s / m(i, i);
    }
    for (std::size_t ii = n; ii-- > 0;) {
      double s = rhs(ii, c);
      for (std::size_t k = ii + 1; k < n; ++k) s -= m(k, ii) * rhs(k, c);
      rhs(ii, c) = s / m(ii, ii);
    }
  }
  return true;
}

}  // namespace

Tensor2 ridge_lstsq(const Tensor2& a, const Tensor2& b, double lambda) {
  if (a.rows() != b.rows()) {
    throw ShapeError("ridge_lstsq: row counts differ, A " + shape_str(a) + " vs b " +
                     shape_str(b));
  }
  if (lambda < 0.0) throw ConfigError("ridge_lstsq: lambda must be >= 0");
  const Tensor2 at = transpose(a);
  const Tensor2 gram0 = matmul(at, a);
  const Tensor2 rhs0 = matmul(at, b);
  // A positive lambda must never be fatal: grow it until the shifted system
  // factors. lambda = 0 on a singular system is the caller's error.
  double shift = lambda;
  for (int attempt = 0; attempt < 60; ++attempt) {
    Tensor2 gram = gram0;
    for (std::size_t i = 0; i < gram.rows(); ++i) gram(i, i) += shift;
    Tensor2 rhs = rhs0;
    if (cholesky_solve(gram, rhs)) return rhs;
    if (lambda == 0.0) {
      throw NumericError("ridge_lstsq: normal equations are singular; use lambda > 0");
    }
    shift *= 100.0;
  }
  throw NumericError("ridge_lstsq: normal equations could not be factored");
}

}  // namespace deqfuse
