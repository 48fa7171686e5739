#pragma once

#include <span>

#include "sinkgate/numerics/tensor.hpp"

// Forward-only kernels on plain tensors. The tape ops in autodiff.hpp call
// these for their values, so tape and tape-free evaluations agree bitwise.
namespace sinkgate::ops {

// Rows whose variance falls below this are treated as constant: the
// normalized value is 0 and the LayerNorm output is exactly beta.
inline constexpr double kLayerNormVarianceFloor = 1e-24;

// Numerically stable (row-max subtracted) softmax over each row.
Tensor softmax_rows(const Tensor& x);
// Row i only sees columns j <= i + offset; masked entries are exactly 0.
Tensor causal_softmax_rows(const Tensor& x, std::size_t offset = 0);

Tensor layernorm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);
Tensor rmsnorm_rows(const Tensor& x, const Tensor& gamma, double eps);

double gelu(double x);
double gelu_grad(double x);
Tensor gelu(const Tensor& x);

Tensor add(const Tensor& a, const Tensor& b);
Tensor add_rowvec(const Tensor& x, const Tensor& v);
Tensor scale(const Tensor& x, double c);
Tensor scale_rows(const Tensor& x, std::span<const double> s);

}  // namespace sinkgate::ops
