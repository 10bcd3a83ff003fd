// SPDX-License-Identifier: Apache-2.0
// JSON mapping of configuration structs. Missing keys keep their defaults;
// unknown keys are rejected.
#pragma once

#include <initializer_list>
#include <string>

#include "json.hpp"
#include "thdbar/error.hpp"
#include "thdbar/nn/optim.hpp"

namespace thdbar {

using Json = nlohmann::json;

// Throws ConfigError("unknown config key ...") for the first key of the
// object `j` that is not listed.
void reject_unknown_keys(const Json& j, std::initializer_list<const char*> known, const std::string& where);

template <typename T>
void from_json_into(const Json& j, T& field) {
  if constexpr (requires { from_json_into_struct(j, field); }) {
    from_json_into_struct(j, field);
  } else {
    field = j.get<T>();
  }
}

template <typename T>
void read_key(const Json& j, const char* key, T& field) {
  if (!j.contains(key)) return;
  try {
    from_json_into(j.at(key), field);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad value for config key ") + key + ": " + e.what());
  }
}

}  // namespace thdbar

namespace thdbar::nn {
Json to_json_value(const TransformerSpec& s);
Json to_json_value(const AdamWConfig& c);
void from_json_into_struct(const Json& j, TransformerSpec& s);
void from_json_into_struct(const Json& j, AdamWConfig& c);
}  // namespace thdbar::nn
