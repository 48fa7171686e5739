#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>

#include "sinkgate/numerics/tensor.hpp"

// SGT1 tensor files: an ASCII header line `SGT1 <ndim> <d0> ... f32|f64\n`
// followed by the little-endian payload in row-major order.
namespace sinkgate::sgt1 {

enum class Dtype { f32, f64 };

const char* dtype_name(Dtype d);
Dtype parse_dtype(const std::string& s);

void write(std::ostream& out, const Tensor& t, Dtype dtype = Dtype::f64);
Tensor read(std::istream& in);

void save(const std::filesystem::path& path, const Tensor& t, Dtype dtype = Dtype::f64);
Tensor load(const std::filesystem::path& path);

// Encoded bytes; handy for hashing and bitwise comparisons.
std::string encode(const Tensor& t, Dtype dtype = Dtype::f64);

}  // namespace sinkgate::sgt1
