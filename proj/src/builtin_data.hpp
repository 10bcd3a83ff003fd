// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>

namespace thdbar::detail {

// Text of a file embedded from data/ at build time, looked up by stem
// ("test8-4", "templates").
std::optional<std::string> builtin_text(const std::string& name);

}  // namespace thdbar::detail
