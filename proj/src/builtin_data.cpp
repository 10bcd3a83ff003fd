// SPDX-License-Identifier: Apache-2.0
#include "builtin_data.hpp"

#include <string_view>
#include <utility>

namespace thdbar::detail {
namespace {

constexpr std::pair<std::string_view, std::string_view> kEmbedded[] = {
#include "thdbar_builtin_data.inc"
};

}  // namespace

std::optional<std::string> builtin_text(const std::string& name) {
  for (const auto& [key, text] : kEmbedded) {
    if (key == name) return std::string(text);
  }
  return std::nullopt;
}

}  // namespace thdbar::detail
