#pragma once

#include <initializer_list>
#include <string>

#include <json.hpp>

#include "kpdet/errors.hpp"

namespace kpdet {

using json = nlohmann::json;

/// Rejects keys outside the allowed set; typos in config files should fail
/// loudly rather than silently fall back to defaults.
inline void check_keys(const json& obj, const std::string& where,
                       std::initializer_list<const char*> allowed) {
    if (!obj.is_object()) throw ParameterError(where + ": expected a JSON object");
    for (const auto& [key, value] : obj.items()) {
        bool ok = false;
        for (const char* a : allowed) {
            if (key == a) {
                ok = true;
                break;
            }
        }
        if (!ok) throw ParameterError(where + ": unknown key '" + key + "'");
    }
}

template <typename T>
T get_or(const json& obj, const char* key, T fallback) {
    if (obj.contains(key)) return obj.at(key).get<T>();
    return fallback;
}

} // namespace kpdet
