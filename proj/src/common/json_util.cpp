#include "sinkgate/common/json_util.hpp"

#include <cstdio>

#include "sinkgate/numerics/rng.hpp"

namespace sinkgate::jsonu {

void require_object(const json& j, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
}

void require_only(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  require_object(j, where);
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

std::uint64_t hash(const json& j) { return fnv1a64(j.dump()); }

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

std::string num(double v) { return json(v).dump(); }

}  // namespace sinkgate::jsonu
