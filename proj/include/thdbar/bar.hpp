// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "thdbar/armask.hpp"
#include "thdbar/bth.hpp"
#include "thdbar/config_json.hpp"
#include "thdbar/nn/optim.hpp"
#include "thdbar/vq.hpp"

namespace thdbar::bar {

/// Joint vocabulary: EEG codes [0, V), printable ASCII 32..126, then the
/// specials SEP, END, PAD, START.
struct VocabLayout {
  static constexpr std::size_t kTextSize = 95;
  std::size_t eeg = 0;

  std::size_t text_begin() const { return eeg; }
  std::size_t sep() const { return eeg + kTextSize; }
  std::size_t end() const { return sep() + 1; }
  std::size_t pad() const { return sep() + 2; }
  std::size_t start() const { return sep() + 3; }
  std::size_t size() const { return sep() + 4; }
  bool is_eeg(std::size_t id) const { return id < eeg; }
  bool is_text(std::size_t id) const { return id >= eeg && id < sep(); }
  // Throws for characters outside 32..126.
  std::size_t char_token(char c) const;
  char token_char(std::size_t id) const;
  std::vector<std::size_t> encode(const std::string& text) const;
  std::string decode(const std::vector<std::size_t>& ids) const;
};

// Named transformer sizes: "tiny" (desk scale), "base", "large", "huge".
nn::TransformerSpec preset_spec(const std::string& name);

struct BarConfig {
  std::string scheme = "test8-4";
  std::vector<int> scales;  // 1-based; empty selects every scale
  std::size_t V = 256;
  std::size_t time_steps = 5;  // patches per window
  std::size_t max_text = 320;  // text positions available after the EEG part
  nn::TransformerSpec model{2, 64, 128, 4};
  armask::MaskMode mask = armask::MaskMode::ScaleTimeWise;
  std::size_t steps = 1000;
  std::size_t batch = 8;
  std::size_t eval_every = 100;
  nn::AdamWConfig optim{1e-3, 1e-4, 0.9, 0.95, 1e-8, 0.1, 0.05, 1.0};
  std::uint64_t seed = 0;

  void validate() const;
};

Json to_json_value(const BarConfig& c);
void from_json_into_struct(const Json& j, BarConfig& c);

/// Rows fed to the transformer. Every sequence contributes `length` rows;
/// row inputs are mixtures of token-embedding rows, positions mixtures of
/// position-embedding rows. Rows with weight 0 carry no loss.
struct SequenceBatch {
  std::size_t batch = 0, length = 0;
  nn::RowMix inputs;
  nn::RowMix positions;
  std::vector<std::size_t> targets;
  std::vector<double> weight;
  std::vector<std::uint8_t> key_valid;
  nn::AttentionMask mask;

  std::size_t rows() const { return targets.size(); }
  // Appends one row with a single input token and the given position rows.
  void push(std::size_t input_token, const std::vector<std::size_t>& position_rows, std::size_t target,
            double w, bool valid = true);
  void validate() const;
};

class BarModel {
 public:
  explicit BarModel(BarConfig cfg);

  const BarConfig& config() const { return cfg_; }
  const bth::Hierarchy& hierarchy() const { return h_; }
  const bth::ScaleSubset& subset() const { return subset_; }
  const VocabLayout& vocab() const { return vocab_; }
  const armask::FlattenOrder& order() const { return order_; }
  std::size_t eeg_length() const { return order_.length(); }

  // Block inputs for one token sequence, appended in flatten order:
  //   block (t, k>0): the parent token of scale k-1 at time t, broadcast
  //     to the groups of scale k;
  //   block (t, 0): mean embedding of the finest selected tokens at t-1
  //     under each first-scale group, or START at t = 0.
  // The time-wise mask feeds every block the t-1 summary and the
  // scale-wise mask feeds the first scale START, so that inputs only come
  // from blocks each mask lets the block condition on.
  void append_eeg(const vq::MultiScaleTokens& R, SequenceBatch& out) const;
  SequenceBatch build_inputs(const std::vector<const vq::MultiScaleTokens*>& seqs) const;
  SequenceBatch build_inputs(const vq::MultiScaleTokens& R) const;

  // EEG block mask for the model's mode; text rows after the EEG part see
  // every EEG row and the text rows up to themselves.
  nn::AttentionMask mask(std::size_t text_len = 0) const;
  std::vector<std::size_t> eeg_position_rows(std::size_t t, std::size_t scale, std::size_t g) const;
  std::size_t text_position_row(std::size_t j) const;

  nn::Tensor logits(const SequenceBatch& b) const;  // [rows, vocab]
  nn::ParamList parameters() const;

  // bar.json (config) and bar.ckpt (weights).
  void save(const std::string& dir) const;
  static BarModel load(const std::string& dir);

 private:
  BarConfig cfg_;
  bth::Hierarchy h_;
  bth::ScaleSubset subset_;
  VocabLayout vocab_;
  armask::FlattenOrder order_;
  std::vector<std::size_t> group_offset_;
  std::size_t text_offset_ = 0;
  nn::Tensor tok_emb_, pos_emb_;
  nn::Transformer trunk_;
  nn::Linear head_;
};

// Mean cross-entropy over rows with weight > 0 (weights renormalised),
// softmax over [lo, hi). Defaults to the EEG range.
struct NstpOutput {
  nn::Tensor loss;
  nn::Tensor logits;
  double accuracy = 0.0;  // argmax over [lo, hi) on counted rows
  std::size_t counted = 0;
};
NstpOutput nstp_forward(const BarModel& m, const SequenceBatch& b, std::optional<std::size_t> lo = std::nullopt,
                        std::optional<std::size_t> hi = std::nullopt);
nn::Tensor nstp_loss(const BarModel& m, const SequenceBatch& b);

// log p(target) per row over the EEG range (0 for rows with weight 0).
std::vector<double> row_log_probs(const BarModel& m, const SequenceBatch& b);
double log_likelihood(const BarModel& m, const vq::MultiScaleTokens& R);
// exp(mean cross-entropy) over every position of every sequence.
double perplexity(const BarModel& m, const std::vector<const vq::MultiScaleTokens*>& seqs,
                  std::size_t chunk = 32);

// Keeps the first `prefix_blocks` blocks of `prefix` and samples the rest
// block by block; positions in a block are drawn independently from their
// distributions over the EEG range. temperature < 1e-6 is greedy.
vq::MultiScaleTokens generate(const BarModel& m, const vq::MultiScaleTokens& prefix, std::size_t prefix_blocks,
                              double temperature, std::uint64_t seed);

struct PretrainRow {
  std::size_t step = 0;
  double loss = 0.0;
  double token_acc = 0.0;
  std::optional<double> ppl_val;
};

struct PretrainResult {
  BarModel model;
  std::vector<PretrainRow> report;
};

// Uses the corpus's train split for updates and its val split for
// perplexity (at step 0, every eval_every steps and at the end).
PretrainResult pretrain(const vq::TokenCorpus& corpus, const BarConfig& cfg,
                        const std::function<void(const PretrainRow&)>& on_row = {});
void write_report(const std::string& path, const std::vector<PretrainRow>& rows);

// Fills scheme, scales, V and time_steps from a corpus.
BarConfig adapt_to_corpus(BarConfig cfg, const vq::TokenCorpus& corpus);

/// Token corpus with planted structure: the coarsest token drifts by +1
/// per step, each finer token is an affine function of its parent and its
/// group, and every token is replaced by a uniform draw with probability
/// `noise`.
struct PlantedCorpusConfig {
  std::string scheme = "test8-4";
  std::vector<int> scales;
  std::size_t V = 16;
  std::size_t time_steps = 5;
  std::size_t train = 512;
  std::size_t val = 128;
  double noise = 0.1;
  std::uint64_t seed = 0;
};
vq::TokenCorpus planted_corpus(const PlantedCorpusConfig& cfg);

}  // namespace thdbar::bar
