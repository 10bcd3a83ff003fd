// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <ostream>

#include "CLI11.hpp"
#include "thdbar/cli.hpp"
#include "thdbar/parallel.hpp"

namespace thdbar::cli {

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"EEG tokenization, autoregressive pretraining and instruction tuning pipeline", "thdbar"};
  std::string config_path, out_dir, preset;
  std::optional<std::uint64_t> seed;
  app.add_option("--config", config_path, "JSON run configuration (unknown keys are rejected)");
  app.add_option("--seed", seed, "Seed for every stage (overrides the config)");
  app.add_option("--out", out_dir, "Run directory holding the artifact directories")->required();
  app.add_option("--preset", preset, "Transformer size of the autoregressive model")
      ->check(CLI::IsMember({"tiny", "base", "large", "huge"}));
  app.require_subcommand(1, 1);
  const std::vector<std::pair<std::string, std::string>> descriptions{
      {"synth", "write a labelled synthetic corpus to raw/"},
      {"preprocess", "filter, resample and scale raw/ into preprocessed/"},
      {"train-tokenizer", "train the multi-scale tokenizer into tokenizer/"},
      {"tokenize", "tokenize preprocessed/ into tokens/tokens.thtk"},
      {"pretrain", "next-scale-time pretraining into bar/"},
      {"finetune", "instruction tuning on the configured task into finetune/"},
      {"eval", "constrained decoding on the test split into eval/"},
      {"report", "SVG charts and a text summary of every report CSV into report/"}};
  for (const auto& [name, text] : descriptions) app.add_subcommand(name, text)->fallthrough();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    RunConfig cfg = config_path.empty() ? RunConfig{} : read_run_config(config_path);
    if (!preset.empty()) cfg.bar.model = bar::preset_spec(preset);
    if (seed) cfg.seed = seed;
    cfg.resolve();
    cfg.validate();
    threads_from_env();
    const auto subcommand = app.get_subcommands().front()->get_name();
    run_step(subcommand, cfg, Layout{out_dir}, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace thdbar::cli
