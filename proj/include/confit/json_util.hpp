#pragma once

#include <algorithm>
#include <initializer_list>
#include <string>

#include "confit/error.hpp"
#include "json.hpp"

namespace confit {

// Config objects fail loudly on typos instead of silently using defaults.
inline void reject_unknown_keys(const nlohmann::json& obj,
                                std::initializer_list<const char*> allowed,
                                const std::string& where) {
  if (!obj.is_object()) {
    throw ConfigError(where + " must be a JSON object");
  }
  for (const auto& item : obj.items()) {
    const std::string& key = item.key();
    const bool known =
        std::any_of(allowed.begin(), allowed.end(),
                    [&](const char* a) { return key == a; });
    if (!known) {
      throw ConfigError("unknown key '" + key + "' in " + where);
    }
  }
}

}  // namespace confit
