#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>

#include "json.hpp"
#include "sinkgate/numerics/error.hpp"

namespace sinkgate::jsonu {

using nlohmann::json;

// Rejects keys outside `allowed`; `where` names the object in the message.
void require_only(const json& j, std::initializer_list<const char*> allowed, const std::string& where);
void require_object(const json& j, const std::string& where);

template <typename T>
T get_or(const json& j, const char* key, T fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

// FNV-1a of the canonical (sorted-key, compact) serialization.
std::uint64_t hash(const json& j);
std::string hex64(std::uint64_t v);

// Stable numeric formatting used for every emitted JSON/CSV artifact.
std::string dump(const json& j);
// Shortest round-trip decimal form of a double, as used in CSV cells.
std::string num(double v);

}  // namespace sinkgate::jsonu
