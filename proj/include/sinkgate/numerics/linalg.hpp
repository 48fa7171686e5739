#pragma once

#include "sinkgate/numerics/tensor.hpp"

namespace sinkgate::linalg {

// X with A X = B for square A (Gauss-Jordan, partial pivoting).
// Throws NumericError when A is singular to working precision.
Tensor solve(const Tensor& a, const Tensor& b);

// Right inverse A^T (A A^T)^-1 of a full-row-rank m x k matrix (m <= k).
Tensor right_pinv(const Tensor& a);

Tensor transpose(const Tensor& a);

}  // namespace sinkgate::linalg
