#include <atomic>
#include <cstdlib>
#include <string_view>

#include "kernels_impl.hpp"

namespace sinkgate::kernels {
namespace {

const KernelTable* pick_default() {
  if (const char* env = std::getenv("SINKGATE_KERNELS")) {
    const std::string_view want(env);
    if (want == "scalar") return &detail::kScalarTable;
    if (want == "avx2" && detail::avx2_table()) return detail::avx2_table();
    if (want == "neon" && detail::neon_table()) return detail::neon_table();
  }
  if (auto* t = detail::avx2_table()) return t;
  if (auto* t = detail::neon_table()) return t;
  return &detail::kScalarTable;
}

std::atomic<const KernelTable*>& active_slot() {
  static std::atomic<const KernelTable*> slot{pick_default()};
  return slot;
}

void require_matrix(const Tensor& t, const char* what) {
  if (t.ndim() != 2) throw ShapeError(std::string(what) + ": expected a matrix, got " + shape_str(t.shape()));
}

}  // namespace

const KernelTable& scalar() { return detail::kScalarTable; }
const KernelTable* avx2() { return detail::avx2_table(); }
const KernelTable* neon() { return detail::neon_table(); }

const KernelTable& active() { return *active_slot().load(std::memory_order_relaxed); }
void set_active(const KernelTable& table) { active_slot().store(&table, std::memory_order_relaxed); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul: inner dims differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const auto& kt = active();
  Tensor c = Tensor::matrix(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c.row(i).data();
    const double* ai = a.row(i).data();
    for (std::size_t p = 0; p < k; ++p) kt.axpy(ci, ai[p], b.row(p).data(), n);
  }
  return c;
}

Tensor matmul_bt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_bt");
  require_matrix(b, "matmul_bt");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw ShapeError("matmul_bt: inner dims differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  }
  const auto& kt = active();
  Tensor c = Tensor::matrix(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) c.at(i, j) = kt.dot(a.row(i).data(), b.row(j).data(), k);
  }
  return c;
}

Tensor matmul_at(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_at");
  require_matrix(b, "matmul_at");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != m) {
    throw ShapeError("matmul_at: row counts differ " + shape_str(a.shape()) + "^T x " + shape_str(b.shape()));
  }
  const auto& kt = active();
  Tensor c = Tensor::matrix(k, n);
  for (std::size_t r = 0; r < m; ++r) {
    const double* ar = a.row(r).data();
    const double* br = b.row(r).data();
    for (std::size_t i = 0; i < k; ++i) kt.axpy(c.row(i).data(), ar[i], br, n);
  }
  return c;
}

Tensor matmul_naive(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_naive");
  require_matrix(b, "matmul_naive");
  if (a.cols() != b.rows()) throw ShapeError("matmul_naive: inner dims differ");
  Tensor c = Tensor::matrix(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < a.cols(); ++p) s += a.at(i, p) * b.at(p, j);
      c.at(i, j) = s;
    }
  }
  return c;
}

}  // namespace sinkgate::kernels
