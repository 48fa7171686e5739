#include "sinkgate/numerics/sgt1.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

namespace sinkgate::sgt1 {
namespace {

template <typename U>
void put_le(std::string& buf, U bits) {
  for (std::size_t i = 0; i < sizeof(U); ++i) buf.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

template <typename U>
U get_le(const unsigned char* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

}  // namespace

const char* dtype_name(Dtype d) { return d == Dtype::f32 ? "f32" : "f64"; }

Dtype parse_dtype(const std::string& s) {
  if (s == "f32") return Dtype::f32;
  if (s == "f64") return Dtype::f64;
  throw ConfigError("unknown dtype '" + s + "' (expected f32 or f64)");
}

std::string encode(const Tensor& t, Dtype dtype) {
  std::string buf = "SGT1 " + std::to_string(t.ndim());
  for (auto d : t.shape()) buf += " " + std::to_string(d);
  buf += " ";
  buf += dtype_name(dtype);
  buf += "\n";
  for (double v : t.data()) {
    if (dtype == Dtype::f64) {
      put_le(buf, std::bit_cast<std::uint64_t>(v));
    } else {
      put_le(buf, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    }
  }
  return buf;
}

void write(std::ostream& out, const Tensor& t, Dtype dtype) {
  const std::string buf = encode(t, dtype);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("SGT1 write failed");
}

Tensor read(std::istream& in) {
  std::string header;
  if (!std::getline(in, header)) throw IoError("SGT1: missing header");
  std::istringstream hs(header);
  std::string magic, dt;
  std::size_t ndim = 0;
  if (!(hs >> magic >> ndim) || magic != "SGT1") throw IoError("SGT1: bad magic in header '" + header + "'");
  Shape shape(ndim);
  for (auto& d : shape) {
    if (!(hs >> d)) throw IoError("SGT1: truncated shape");
  }
  if (!(hs >> dt)) throw IoError("SGT1: missing dtype");
  const Dtype dtype = dt == "f32" ? Dtype::f32 : dt == "f64" ? Dtype::f64 : throw IoError("SGT1: bad dtype " + dt);
  const std::size_t n = shape_size(shape);
  const std::size_t width = dtype == Dtype::f64 ? 8 : 4;
  std::string payload(n * width, '\0');
  in.read(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (static_cast<std::size_t>(in.gcount()) != payload.size()) throw IoError("SGT1: truncated payload");
  std::vector<double> data(n);
  const auto* p = reinterpret_cast<const unsigned char*>(payload.data());
  for (std::size_t i = 0; i < n; ++i) {
    if (dtype == Dtype::f64) {
      data[i] = std::bit_cast<double>(get_le<std::uint64_t>(p + 8 * i));
    } else {
      data[i] = std::bit_cast<float>(get_le<std::uint32_t>(p + 4 * i));
    }
  }
  return Tensor(std::move(shape), std::move(data));
}

void save(const std::filesystem::path& path, const Tensor& t, Dtype dtype) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write(out, t, dtype);
}

Tensor load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return read(in);
}

}  // namespace sinkgate::sgt1
