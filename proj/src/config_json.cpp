// SPDX-License-Identifier: Apache-2.0
#include "thdbar/config_json.hpp"

#include <algorithm>

namespace thdbar {

void reject_unknown_keys(const Json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    const bool ok = std::any_of(known.begin(), known.end(), [&](const char* k) { return key == k; });
    if (!ok) throw ConfigError("unknown config key: " + (where.empty() ? key : where + "." + key));
  }
}

}  // namespace thdbar

namespace thdbar::nn {

Json to_json_value(const TransformerSpec& s) {
  return Json{{"layers", s.layers}, {"hidden", s.hidden}, {"mlp", s.mlp}, {"heads", s.heads}};
}

Json to_json_value(const AdamWConfig& c) {
  return Json{{"peak_lr", c.peak_lr},   {"min_lr", c.min_lr},       {"beta1", c.beta1},
              {"beta2", c.beta2},       {"eps", c.eps},             {"weight_decay", c.weight_decay},
              {"warmup_fraction", c.warmup_fraction}, {"grad_clip", c.grad_clip}};
}

void from_json_into_struct(const Json& j, TransformerSpec& s) {
  reject_unknown_keys(j, {"layers", "hidden", "mlp", "heads"}, "transformer");
  read_key(j, "layers", s.layers);
  read_key(j, "hidden", s.hidden);
  read_key(j, "mlp", s.mlp);
  read_key(j, "heads", s.heads);
}

void from_json_into_struct(const Json& j, AdamWConfig& c) {
  reject_unknown_keys(j, {"peak_lr", "min_lr", "beta1", "beta2", "eps", "weight_decay", "warmup_fraction", "grad_clip"},
                      "optim");
  read_key(j, "peak_lr", c.peak_lr);
  read_key(j, "min_lr", c.min_lr);
  read_key(j, "beta1", c.beta1);
  read_key(j, "beta2", c.beta2);
  read_key(j, "eps", c.eps);
  read_key(j, "weight_decay", c.weight_decay);
  read_key(j, "warmup_fraction", c.warmup_fraction);
  read_key(j, "grad_clip", c.grad_clip);
}

}  // namespace thdbar::nn
