// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <fstream>
#include <sstream>

#include "thdbar/cli.hpp"

namespace thdbar::dsp {

Json to_json_value(const PreprocessConfig& c) {
  return Json{{"target_rate", c.target_rate}, {"band_lo_hz", c.band_lo_hz}, {"band_hi_hz", c.band_hi_hz},
              {"band_order", c.band_order},   {"line_hz", c.line_hz},       {"notch_q", c.notch_q}};
}

void from_json_into_struct(const Json& j, PreprocessConfig& c) {
  reject_unknown_keys(j, {"target_rate", "band_lo_hz", "band_hi_hz", "band_order", "line_hz", "notch_q"}, "preprocess");
  read_key(j, "target_rate", c.target_rate);
  read_key(j, "band_lo_hz", c.band_lo_hz);
  read_key(j, "band_hi_hz", c.band_hi_hz);
  read_key(j, "band_order", c.band_order);
  read_key(j, "line_hz", c.line_hz);
  read_key(j, "notch_q", c.notch_q);
}

}  // namespace thdbar::dsp

namespace thdbar::cli {

void DataConfig::validate() const {
  if (segments == 0) throw ConfigError("data.segments must be >= 1");
  if (n_classes < 1) throw ConfigError("data.n_classes must be >= 1");
  if (!(duration_s > 0.0) || !(rate > 0.0)) throw ConfigError("data.duration_s and data.rate must be positive");
  if (!(val_fraction >= 0.0) || !(test_fraction >= 0.0) || val_fraction + test_fraction >= 1.0)
    throw ConfigError("data split fractions must be >= 0 and sum below 1");
}

RunConfig::RunConfig() {
  // Desk-scale defaults for the three-region task.
  tokenizer.scheme = "tri12-4";
  tokenizer.steps = 1000;
}

void RunConfig::resolve() {
  if (!seed) return;
  data.seed = *seed;
  tokenizer.seed = *seed;
  bar.seed = *seed;
  finetune.seed = *seed;
}

void RunConfig::validate() const {
  data.validate();
  preprocess.validate();
  tokenizer.validate();
  bar.validate();
  finetune.validate();
  if (task.empty()) throw ConfigError("task must not be empty");
}

Json to_json_value(const DataConfig& c) {
  return Json{{"segments", c.segments},
              {"n_classes", c.n_classes},
              {"duration_s", c.duration_s},
              {"rate", c.rate},
              {"global_rhythm_hz", c.global_rhythm_hz},
              {"region_rhythms_hz", c.region_rhythms_hz},
              {"global_amplitude_uv", c.global_amplitude_uv},
              {"region_amplitude_uv", c.region_amplitude_uv},
              {"snr_db", std::isinf(c.snr_db) ? Json(nullptr) : Json(c.snr_db)},
              {"val_fraction", c.val_fraction},
              {"test_fraction", c.test_fraction},
              {"seed", c.seed}};
}

void from_json_into_struct(const Json& j, DataConfig& c) {
  reject_unknown_keys(j,
                      {"segments", "n_classes", "duration_s", "rate", "global_rhythm_hz", "region_rhythms_hz",
                       "global_amplitude_uv", "region_amplitude_uv", "snr_db", "val_fraction", "test_fraction", "seed"},
                      "data");
  read_key(j, "segments", c.segments);
  read_key(j, "n_classes", c.n_classes);
  read_key(j, "duration_s", c.duration_s);
  read_key(j, "rate", c.rate);
  read_key(j, "global_rhythm_hz", c.global_rhythm_hz);
  read_key(j, "region_rhythms_hz", c.region_rhythms_hz);
  read_key(j, "global_amplitude_uv", c.global_amplitude_uv);
  read_key(j, "region_amplitude_uv", c.region_amplitude_uv);
  if (j.contains("snr_db")) {
    if (j.at("snr_db").is_null())
      c.snr_db = std::numeric_limits<double>::infinity();
    else
      read_key(j, "snr_db", c.snr_db);
  }
  read_key(j, "val_fraction", c.val_fraction);
  read_key(j, "test_fraction", c.test_fraction);
  read_key(j, "seed", c.seed);
}

Json to_json_value(const RunConfig& c) {
  return Json{{"seed", c.seed ? Json(*c.seed) : Json(nullptr)},
              {"data", to_json_value(c.data)},
              {"preprocess", dsp::to_json_value(c.preprocess)},
              {"tokenizer", tokenizer::to_json_value(c.tokenizer)},
              {"bar", bar::to_json_value(c.bar)},
              {"finetune", instruct::to_json_value(c.finetune)},
              {"task", c.task},
              {"templates", c.templates},
              {"from_pretrained", c.from_pretrained}};
}

void from_json_into_struct(const Json& j, RunConfig& c) {
  reject_unknown_keys(j,
                      {"seed", "data", "preprocess", "tokenizer", "bar", "finetune", "task", "templates",
                       "from_pretrained"},
                      "");
  if (j.contains("seed")) {
    if (j.at("seed").is_null()) {
      c.seed.reset();
    } else {
      std::uint64_t s = 0;
      read_key(j, "seed", s);
      c.seed = s;
    }
  }
  read_key(j, "data", c.data);
  read_key(j, "preprocess", c.preprocess);
  if (j.contains("tokenizer")) tokenizer::from_json_into_struct(j.at("tokenizer"), c.tokenizer);
  if (j.contains("bar")) bar::from_json_into_struct(j.at("bar"), c.bar);
  if (j.contains("finetune")) instruct::from_json_into_struct(j.at("finetune"), c.finetune);
  read_key(j, "task", c.task);
  read_key(j, "templates", c.templates);
  read_key(j, "from_pretrained", c.from_pretrained);
}

RunConfig read_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  Json j;
  try {
    j = Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
  RunConfig c;
  from_json_into_struct(j, c);
  return c;
}

}  // namespace thdbar::cli
