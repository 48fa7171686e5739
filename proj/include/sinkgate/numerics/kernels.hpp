#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "sinkgate/numerics/tensor.hpp"

// Data-parallel inner loops. Every variant (scalar, AVX2, NEON) performs the
// same floating-point operations in the same order:
//   * reductions keep four interleaved partial sums (lane l takes elements
//     i with i % 4 == l over the 4-aligned body), combine them as
//     (l0 + l1) + (l2 + l3), then add the tail sequentially;
//   * multiply and add are separate roundings (no FMA contraction).
// The variants are therefore bitwise interchangeable, which keeps run outputs
// reproducible whichever table the dispatcher picks.
namespace sinkgate::kernels {

struct KernelTable {
  const char* name;
  double (*dot)(const double* a, const double* b, std::size_t n);
  double (*sum)(const double* x, std::size_t n);
  // y[i] += a * x[i]
  void (*axpy)(double* y, double a, const double* x, std::size_t n);
  // y[i] = a[i] + b[i]
  void (*add)(double* y, const double* a, const double* b, std::size_t n);
  // y[i] = a[i] * b[i]
  void (*mul)(double* y, const double* a, const double* b, std::size_t n);
  // y[i] = a * x[i]
  void (*scale)(double* y, double a, const double* x, std::size_t n);
};

const KernelTable& scalar();
// nullptr when the variant was not compiled in or the CPU lacks the ISA.
const KernelTable* avx2();
const KernelTable* neon();

// Table used by all tensor-level routines. Chosen once at first use: the best
// supported variant, unless SINKGATE_KERNELS=scalar|avx2|neon overrides it.
const KernelTable& active();
void set_active(const KernelTable& table);

// Tensor-level products built on the active table.
// C[m x n] = A[m x k] * B[k x n]
Tensor matmul(const Tensor& a, const Tensor& b);
// C[m x n] = A[m x k] * B[n x k]^T
Tensor matmul_bt(const Tensor& a, const Tensor& b);
// C[k x n] = A[m x k]^T * B[m x n]
Tensor matmul_at(const Tensor& a, const Tensor& b);

// Reference triple loop (sequential k) used only by oracles.
Tensor matmul_naive(const Tensor& a, const Tensor& b);

}  // namespace sinkgate::kernels
