#pragma once

#include <algorithm>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <string_view>

#include "json.hpp"

namespace fmc {

/// Raised for malformed configuration documents.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Rejects keys of `obj` not listed in `allowed`.
inline void reject_unknown_keys(const nlohmann::json& obj, std::initializer_list<std::string_view> allowed,
                                std::string_view where) {
  if (!obj.is_object()) throw ConfigError(std::string(where) + ": expected a JSON object");
  for (const auto& item : obj.items()) {
    if (std::find(allowed.begin(), allowed.end(), item.key()) == allowed.end()) {
      throw ConfigError(std::string(where) + ": unknown key \"" + item.key() + "\"");
    }
  }
}

/// Reads obj[key] into `out` when present, with a typed error message.
template <typename T>
void read_optional(const nlohmann::json& obj, const char* key, T& out, std::string_view where) {
  auto it = obj.find(key);
  if (it == obj.end()) return;
  try {
    out = it->template get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(std::string(where) + "." + key + ": wrong type (" + it->dump() + ")");
  }
}

}  // namespace fmc
