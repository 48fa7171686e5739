#pragma once

#include <cstdint>
#include <string_view>

namespace sinkgate {

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t basis = 0xcbf29ce484222325ULL);
std::uint64_t mix64(std::uint64_t z);

// Counter-based generator (SplitMix64 stream). Sub-streams are derived as
// hash(run_seed, purpose_tag, index), so they do not depend on the order in
// which other streams are consumed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : key_(mix64(seed)) {}

  static std::uint64_t derive(std::uint64_t run_seed, std::string_view tag, std::uint64_t index);
  static Rng stream(std::uint64_t run_seed, std::string_view tag, std::uint64_t index = 0) {
    return Rng(derive(run_seed, tag, index));
  }
  // Child stream keyed on this stream's key (not on how much was consumed).
  Rng split(std::string_view tag, std::uint64_t index = 0) const { return stream(key_, tag, index); }

  std::uint64_t next_u64() { return mix64(key_ + (++counter_) * 0x9e3779b97f4a7c15ULL); }
  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Unbiased integer in [0, n); n > 0.
  std::uint64_t below(std::uint64_t n);
  double normal();

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace sinkgate
