// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>

#include "thdbar/armask.hpp"
#include "thdbar/cli.hpp"
#include "thdbar/parallel.hpp"

namespace thdbar::cli {

namespace fs = std::filesystem;

namespace {

void require_artifact(const std::string& path) {
  if (!fs::exists(path)) throw Error("missing upstream artifact: " + path);
}

void prepare_dir(const std::string& dir, const RunConfig& cfg) {
  fs::create_directories(dir);
  std::ofstream out(dir + "/config.json", std::ios::trunc);
  if (!out) throw Error("cannot write " + dir + "/config.json");
  out << to_json_value(cfg).dump(2) << '\n';
}

std::uint8_t split_code(signalio::Split s) {
  switch (s) {
    case signalio::Split::Train: return 0;
    case signalio::Split::Val: return 1;
    case signalio::Split::Test: return 2;
  }
  return 0;
}

std::string segment_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "seg_%05zu.thds", i);
  return buf;
}

std::uint64_t segment_seed(std::uint64_t seed, std::size_t i) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (i + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

vq::TokenCorpus read_corpus(const Layout& out) {
  require_artifact(out.tokens_file());
  return vq::read_tokens(out.tokens_file());
}

instruct::PromptTemplate task_template(const RunConfig& cfg) {
  const auto registry = instruct::load_templates(cfg.templates);
  return instruct::find_template(registry, cfg.task);
}

}  // namespace

void synth(const RunConfig& cfg, const Layout& out, std::ostream& log) {
  const auto h = bth::load_hierarchy(cfg.tokenizer.scheme);
  signalio::SyntheticConfig sc;
  sc.montage_id = h.montage_id();
  sc.rate = cfg.data.rate;
  sc.duration_s = cfg.data.duration_s;
  sc.n_classes = cfg.data.n_classes;
  sc.global_rhythm_hz = cfg.data.global_rhythm_hz;
  sc.region_rhythms_hz = cfg.data.region_rhythms_hz;
  sc.global_amplitude_uv = cfg.data.global_amplitude_uv;
  sc.region_amplitude_uv = cfg.data.region_amplitude_uv;
  sc.snr_db = cfg.data.snr_db;
  sc.validate(h);

  const std::size_t n = cfg.data.segments;
  const auto classes = static_cast<std::size_t>(cfg.data.n_classes);
  std::vector<signalio::Split> split(n, signalio::Split::Train);
  for (std::size_t c = 0; c < classes; ++c) {
    std::vector<std::size_t> members;
    for (std::size_t i = c; i < n; i += classes) members.push_back(i);
    const auto m = members.size();
    auto n_test = static_cast<std::size_t>(std::lround(static_cast<double>(m) * cfg.data.test_fraction));
    auto n_val = static_cast<std::size_t>(std::lround(static_cast<double>(m) * cfg.data.val_fraction));
    while (n_test + n_val >= m && n_test + n_val > 0) (n_test >= n_val ? n_test : n_val)--;
    for (std::size_t k = 0; k < m; ++k) {
      if (k >= m - n_test)
        split[members[k]] = signalio::Split::Test;
      else if (k >= m - n_test - n_val)
        split[members[k]] = signalio::Split::Val;
    }
  }

  const auto dir = out.raw();
  fs::remove_all(dir);
  prepare_dir(dir, cfg);
  signalio::DatasetManifest manifest;
  for (std::size_t i = 0; i < n; ++i) {
    sc.seed = segment_seed(cfg.data.seed, i);
    const int label = static_cast<int>(i % classes);
    const auto s = signalio::generate_synthetic(sc, h, label);
    signalio::write_segment(s.segment, dir + "/" + segment_name(i));
    manifest.entries.push_back({segment_name(i), label, split[i]});
  }
  signalio::write_manifest(manifest, dir + "/manifest.tsv");
  log << "synth: " << n << " segments (" << sc.montage_id << ") -> " << dir << '\n';
}

void preprocess(const RunConfig& cfg, const Layout& out, std::ostream& log) {
  const auto src = out.raw() + "/manifest.tsv";
  require_artifact(src);
  const auto in = signalio::read_manifest(src);
  const auto dir = out.preprocessed();
  fs::remove_all(dir);
  prepare_dir(dir, cfg);
  signalio::DatasetManifest manifest;
  for (std::size_t i = 0; i < in.entries.size(); ++i) {
    const auto& e = in.entries[i];
    const auto seg = signalio::read_segment(signalio::resolve_entry(src, e));
    signalio::write_segment(dsp::preprocess(seg, cfg.preprocess), dir + "/" + segment_name(i));
    manifest.entries.push_back({segment_name(i), e.label, e.split});
  }
  signalio::write_manifest(manifest, dir + "/manifest.tsv");
  log << "preprocess: " << manifest.entries.size() << " segments -> " << dir << '\n';
}

void train_tokenizer(const RunConfig& cfg, const Layout& out, std::ostream& log) {
  const auto src = out.preprocessed() + "/manifest.tsv";
  require_artifact(src);
  const auto windows = tokenizer::load_windows(src, cfg.tokenizer.window_len, cfg.tokenizer.patch_len);
  const auto dir = out.tokenizer();
  fs::remove_all(dir);
  prepare_dir(dir, cfg);
  auto result = tokenizer::train_tokenizer(windows, cfg.tokenizer, [&](const tokenizer::ReportRow& r) {
    if (r.pcc_val) log << "train-tokenizer: step " << r.step << " loss " << r.total << " pcc_val " << *r.pcc_val << '\n';
  });
  result.model.save(dir);
  tokenizer::write_report(dir + "/report.csv", result.report);
  log << "train-tokenizer: " << windows.size() << " windows, final pcc " << result.final_pcc << " -> " << dir << '\n';
}

void tokenize(const RunConfig& cfg, const Layout& out, std::ostream& log) {
  const auto src = out.preprocessed() + "/manifest.tsv";
  require_artifact(src);
  require_artifact(out.tokenizer());
  const auto model = tokenizer::TokenizerModel::load(out.tokenizer());
  const auto& mc = model.config();
  const auto windows = tokenizer::load_windows(src, mc.window_len, mc.patch_len);

  vq::TokenCorpus corpus;
  corpus.scheme = mc.scheme;
  corpus.group_counts = model.hierarchy().group_counts();
  corpus.scales = model.subset().scales;
  corpus.steps = windows.steps;
  corpus.V = mc.codebook_size;
  corpus.sequences.resize(windows.size());
  parallel_for(windows.size(), [&](std::size_t w) { corpus.sequences[w] = model.tokenize(windows, w); });
  corpus.labels = windows.labels;
  for (auto s : windows.split) corpus.split.push_back(split_code(s));

  const auto dir = out.tokens();
  fs::remove_all(dir);
  prepare_dir(dir, cfg);
  vq::write_tokens(out.tokens_file(), corpus);
  log << "tokenize: " << corpus.sequences.size() << " windows, " << corpus.records_per_sequence()
      << " records per window -> " << out.tokens_file() << '\n';
}

void pretrain(const RunConfig& cfg, const Layout& out, std::ostream& log) {
  const auto corpus = read_corpus(out);
  const auto bcfg = bar::adapt_to_corpus(cfg.bar, corpus);
  const auto dir = out.bar();
  fs::remove_all(dir);
  prepare_dir(dir, cfg);
  auto result = bar::pretrain(corpus, bcfg, [&](const bar::PretrainRow& r) {
    if (r.ppl_val) log << "pretrain: step " << r.step << " loss " << r.loss << " ppl_val " << *r.ppl_val << '\n';
  });
  result.model.save(dir);
  bar::write_report(dir + "/report.csv", result.report);
  armask::write_pbm(dir + "/mask.pbm", result.model.mask());
  log << "pretrain: " << result.report.size() << " report rows -> " << dir << '\n';
}

void finetune(const RunConfig& cfg, const Layout& out, std::ostream& log) {
  const auto corpus = read_corpus(out);
  const auto tpl = task_template(cfg);
  bar::BarModel model = cfg.from_pretrained ? bar::BarModel::load(out.bar())
                                            : bar::BarModel(bar::adapt_to_corpus(cfg.bar, corpus));
  const auto samples = instruct::corpus_samples(corpus, 0, tpl, model.vocab());
  const auto dir = out.finetune();
  fs::remove_all(dir);
  prepare_dir(dir, cfg);
  const auto rows = instruct::finetune(model, samples, cfg.finetune, [&](const instruct::FinetuneRow& r) {
    log << "finetune: step " << r.step << " loss " << r.loss << '\n';
  });
  model.save(dir);
  instruct::write_finetune_report(dir + "/report.csv", rows);
  log << "finetune: " << samples.size() << " samples, task " << tpl.task_id << " -> " << dir << '\n';
}

instruct::EvalResult evaluate(const RunConfig& cfg, const Layout& out, std::ostream& log) {
  const auto model = bar::BarModel::load(out.finetune());
  const auto corpus = read_corpus(out);
  const auto tpl = task_template(cfg);
  const auto samples = instruct::corpus_samples(corpus, 2, tpl, model.vocab());
  if (samples.empty()) throw Error("empty sample set: the token corpus has no labelled test windows");
  const auto result = instruct::evaluate(model, samples, tpl);

  const auto dir = out.eval();
  fs::remove_all(dir);
  prepare_dir(dir, cfg);
  instruct::write_eval_report(dir + "/eval.csv", result, tpl);
  std::ofstream pred(dir + "/predictions.csv", std::ios::trunc);
  pred << "sample,label,predicted,decoded\n";
  for (std::size_t i = 0; i < samples.size(); ++i)
    pred << i << ',' << samples[i].label << ',' << result.predictions[i] << ',' << result.decoded[i] << '\n';
  if (!pred) throw Error("cannot write " + dir + "/predictions.csv");
  log << "eval: " << samples.size() << " samples, balanced accuracy " << result.balanced_accuracy << " -> " << dir
      << '\n';
  return result;
}

const std::vector<std::string>& subcommands() {
  static const std::vector<std::string> names{"synth",    "preprocess", "train-tokenizer", "tokenize",
                                              "pretrain", "finetune",   "eval",            "report"};
  return names;
}

void run_step(const std::string& subcommand, const RunConfig& cfg, const Layout& out, std::ostream& log) {
  if (subcommand == "synth") return synth(cfg, out, log);
  if (subcommand == "preprocess") return preprocess(cfg, out, log);
  if (subcommand == "train-tokenizer") return train_tokenizer(cfg, out, log);
  if (subcommand == "tokenize") return tokenize(cfg, out, log);
  if (subcommand == "pretrain") return pretrain(cfg, out, log);
  if (subcommand == "finetune") return finetune(cfg, out, log);
  if (subcommand == "eval") {
    evaluate(cfg, out, log);
    return;
  }
  if (subcommand == "report") return report(cfg, out, log);
  throw ConfigError("unknown subcommand: " + subcommand);
}

}  // namespace thdbar::cli
