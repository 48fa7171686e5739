#include "sinkgate/numerics/linalg.hpp"

#include <cmath>
#include <utility>

#include "sinkgate/numerics/kernels.hpp"

namespace sinkgate::linalg {

Tensor transpose(const Tensor& a) {
  Tensor t = Tensor::matrix(a.cols(), a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    for (std::size_t c = 0; c < a.cols(); ++c) t.at(c, r) = a.at(r, c);
  }
  return t;
}

Tensor solve(const Tensor& a, const Tensor& b) {
  const std::size_t n = a.rows();
  if (a.cols() != n) throw ShapeError("solve: matrix must be square");
  if (b.rows() != n) throw ShapeError("solve: right-hand side row mismatch");
  Tensor m = a;
  Tensor x = b.reshaped({b.rows(), b.cols()});
  const std::size_t k = x.cols();
  double scale = 0.0;
  for (double v : m.data()) scale = std::max(scale, std::abs(v));
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r) {
      if (std::abs(m.at(r, col)) > std::abs(m.at(piv, col))) piv = r;
    }
    if (std::abs(m.at(piv, col)) <= 1e-13 * scale) throw NumericError("solve: singular matrix");
    if (piv != col) {
      for (std::size_t c = 0; c < n; ++c) std::swap(m.at(piv, c), m.at(col, c));
      for (std::size_t c = 0; c < k; ++c) std::swap(x.at(piv, c), x.at(col, c));
    }
    const double inv = 1.0 / m.at(col, col);
    for (std::size_t c = 0; c < n; ++c) m.at(col, c) *= inv;
    for (std::size_t c = 0; c < k; ++c) x.at(col, c) *= inv;
    for (std::size_t r = 0; r < n; ++r) {
      if (r == col) continue;
      const double f = m.at(r, col);
      if (f == 0.0) continue;
      for (std::size_t c = 0; c < n; ++c) m.at(r, c) -= f * m.at(col, c);
      for (std::size_t c = 0; c < k; ++c) x.at(r, c) -= f * x.at(col, c);
    }
  }
  return x;
}

Tensor right_pinv(const Tensor& a) {
  if (a.rows() > a.cols()) throw ShapeError("right_pinv: needs rows <= cols");
  const Tensor at = transpose(a);
  const Tensor gram = kernels::matmul(a, at);  // m x m
  // A^T (A A^T)^-1 = (solve(G, A))^T since G is symmetric.
  return transpose(solve(gram, a));
}

}  // namespace sinkgate::linalg
