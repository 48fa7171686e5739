#include "sinkgate/numerics/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "sinkgate/numerics/kernels.hpp"

namespace sinkgate::ops {
namespace {

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void softmax_prefix(std::span<const double> in, std::span<double> out, std::size_t live) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < live; ++j) mx = std::max(mx, in[j]);
  double z = 0.0;
  for (std::size_t j = 0; j < live; ++j) {
    out[j] = std::exp(in[j] - mx);
    z += out[j];
  }
  const double inv = 1.0 / z;
  for (std::size_t j = 0; j < live; ++j) out[j] *= inv;
  for (std::size_t j = live; j < out.size(); ++j) out[j] = 0.0;
}

}  // namespace

Tensor softmax_rows(const Tensor& x) {
  x.check_finite("softmax_rows input");
  Tensor y(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) softmax_prefix(x.row(r), y.row(r), x.cols());
  return y;
}

Tensor causal_softmax_rows(const Tensor& x, std::size_t offset) {
  Tensor y(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const std::size_t live = std::min(x.cols(), r + offset + 1);
    for (std::size_t j = 0; j < live; ++j) {
      if (!std::isfinite(x.at(r, j))) throw NumericError("causal_softmax_rows: non-finite input");
    }
    softmax_prefix(x.row(r), y.row(r), live);
  }
  return y;
}

Tensor layernorm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t d = x.cols();
  if (d == 0) throw ShapeError("layernorm_rows: empty feature dimension");
  if (gamma.size() != d || beta.size() != d) throw ShapeError("layernorm_rows: gamma/beta width mismatch");
  Tensor y(x.shape());
  const auto& kt = kernels::active();
  std::vector<double> centered(d);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    auto out = y.row(r);
    const double mean = kt.sum(in.data(), d) / static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) centered[j] = in[j] - mean;
    const double var = kt.dot(centered.data(), centered.data(), d) / static_cast<double>(d);
    if (var < kLayerNormVarianceFloor) {
      for (std::size_t j = 0; j < d; ++j) out[j] = beta[j];
      continue;
    }
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) out[j] = centered[j] * inv * gamma[j] + beta[j];
  }
  return y;
}

Tensor rmsnorm_rows(const Tensor& x, const Tensor& gamma, double eps) {
  const std::size_t d = x.cols();
  if (gamma.size() != d) throw ShapeError("rmsnorm_rows: gamma width mismatch");
  Tensor y(x.shape());
  const auto& kt = kernels::active();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    auto out = y.row(r);
    const double ms = kt.dot(in.data(), in.data(), d) / static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(ms + eps);
    for (std::size_t j = 0; j < d; ++j) out[j] = in[j] * inv * gamma[j];
  }
  return y;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
  const double pdf = std::exp(-0.5 * x * x) * (0.5 * M_2_SQRTPI * M_SQRT1_2);
  return cdf + x * pdf;
}

Tensor gelu(const Tensor& x) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = gelu(x[i]);
  return y;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same(a, b, "add");
  Tensor y(a.shape());
  kernels::active().add(y.data().data(), a.data().data(), b.data().data(), a.size());
  return y;
}

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  if (v.size() != x.cols()) throw ShapeError("add_rowvec: vector width mismatch");
  Tensor y(x.shape());
  const auto& kt = kernels::active();
  for (std::size_t r = 0; r < x.rows(); ++r) kt.add(y.row(r).data(), x.row(r).data(), v.data().data(), x.cols());
  return y;
}

Tensor scale(const Tensor& x, double c) {
  Tensor y(x.shape());
  kernels::active().scale(y.data().data(), c, x.data().data(), x.size());
  return y;
}

Tensor scale_rows(const Tensor& x, std::span<const double> s) {
  if (s.size() != x.rows()) throw ShapeError("scale_rows: coefficient count does not match rows");
  Tensor y(x.shape());
  const auto& kt = kernels::active();
  for (std::size_t r = 0; r < x.rows(); ++r) kt.scale(y.row(r).data(), s[r], x.row(r).data(), x.cols());
  return y;
}

}  // namespace sinkgate::ops
