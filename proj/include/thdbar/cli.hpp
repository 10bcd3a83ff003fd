// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "thdbar/bar.hpp"
#include "thdbar/config_json.hpp"
#include "thdbar/dsp.hpp"
#include "thdbar/instruct.hpp"
#include "thdbar/tokenizer.hpp"

namespace thdbar::dsp {
Json to_json_value(const PreprocessConfig& c);
void from_json_into_struct(const Json& j, PreprocessConfig& c);
}  // namespace thdbar::dsp

namespace thdbar::cli {

/// Synthetic corpus written by `synth`. The montage is the tokenizer
/// scheme's; class c of segment i is i mod n_classes.
struct DataConfig {
  std::size_t segments = 96;
  int n_classes = 3;
  double duration_s = 10.24;
  double rate = 200.0;
  double global_rhythm_hz = 10.0;
  std::vector<double> region_rhythms_hz{6.0, 17.0, 23.0};
  double global_amplitude_uv = 20.0;
  double region_amplitude_uv = 30.0;
  double snr_db = std::numeric_limits<double>::infinity();  // null in JSON
  // Per class, the last round(n*test) members go to test and the
  // round(n*val) before them to val.
  double val_fraction = 0.15;
  double test_fraction = 0.15;
  std::uint64_t seed = 0;

  void validate() const;
};

struct RunConfig {
  std::optional<std::uint64_t> seed;  // when set, overrides every module seed
  DataConfig data;
  dsp::PreprocessConfig preprocess;
  tokenizer::TokenizerConfig tokenizer;
  bar::BarConfig bar;
  instruct::FinetuneConfig finetune;
  std::string task = "region3";
  std::string templates = "builtin";
  bool from_pretrained = true;

  RunConfig();
  // Pushes `seed` (if set) into the module configs.
  void resolve();
  void validate() const;
};

Json to_json_value(const DataConfig& c);
void from_json_into_struct(const Json& j, DataConfig& c);
Json to_json_value(const RunConfig& c);
void from_json_into_struct(const Json& j, RunConfig& c);
RunConfig read_run_config(const std::string& path);

/// Artifact directories below the run root.
struct Layout {
  std::string root;

  std::string raw() const { return root + "/raw"; }
  std::string preprocessed() const { return root + "/preprocessed"; }
  std::string tokenizer() const { return root + "/tokenizer"; }
  std::string tokens() const { return root + "/tokens"; }
  std::string tokens_file() const { return tokens() + "/tokens.thtk"; }
  std::string bar() const { return root + "/bar"; }
  std::string finetune() const { return root + "/finetune"; }
  std::string eval() const { return root + "/eval"; }
  std::string report() const { return root + "/report"; }
};

// Each step reads its upstream artifacts from the layout, writes its own
// directory (including config.json with the resolved config) and throws
// "missing upstream artifact" when an input is absent.
void synth(const RunConfig& cfg, const Layout& out, std::ostream& log);
void preprocess(const RunConfig& cfg, const Layout& out, std::ostream& log);
void train_tokenizer(const RunConfig& cfg, const Layout& out, std::ostream& log);
void tokenize(const RunConfig& cfg, const Layout& out, std::ostream& log);
void pretrain(const RunConfig& cfg, const Layout& out, std::ostream& log);
void finetune(const RunConfig& cfg, const Layout& out, std::ostream& log);
instruct::EvalResult evaluate(const RunConfig& cfg, const Layout& out, std::ostream& log);
void report(const RunConfig& cfg, const Layout& out, std::ostream& log);

const std::vector<std::string>& subcommands();
void run_step(const std::string& subcommand, const RunConfig& cfg, const Layout& out, std::ostream& log);

/// CSV with '#' comment lines, a header row and numeric cells (empty cells
/// are missing values).
struct CsvTable {
  std::vector<std::string> columns;
  std::vector<std::vector<std::optional<double>>> rows;
};
CsvTable read_csv(const std::string& path);

// Self-contained SVG line chart of y against x.
std::string line_chart_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<double>& x, const std::vector<double>& y);

// Command-line entry point; args exclude the program name. Returns the
// process exit status; errors go to `err` as "error: <message>".
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace thdbar::cli
