#pragma once

#include <initializer_list>
#include <string>

#include <nlohmann/json.hpp>

#include "lmnet/errors.hpp"

namespace lmnet {

namespace detail {
// Typos in a config should fail loudly rather than fall back to defaults.
inline void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> known,
                                const std::string& where) {
  if (!j.is_object()) throw ValueError(where + " must be a JSON object");
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || item.key() == k;
    if (!ok) throw ValueError("unknown key '" + item.key() + "' in " + where);
  }
}
}  // namespace detail

}  // namespace lmnet
