// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "thdbar/bth.hpp"
#include "thdbar/config_json.hpp"
#include "thdbar/nn/optim.hpp"
#include "thdbar/signalio.hpp"
#include "thdbar/vq.hpp"

namespace thdbar::tokenizer {

struct TokenizerConfig {
  std::string scheme = "test8-4";
  std::vector<int> scales;  // 1-based; empty selects every scale
  std::size_t codebook_size = 256;
  std::size_t code_dim = 32;
  std::size_t patch_len = 200;
  std::size_t window_len = 1024;
  nn::TransformerSpec encoder{2, 64, 128, 4};
  nn::TransformerSpec decoder{2, 64, 128, 4};
  std::size_t steps = 2000;
  std::size_t batch = 8;  // windows per step
  nn::AdamWConfig optim{1e-3, 1e-4, 0.9, 0.999, 1e-8, 1e-4, 0.05, 0.0};
  double ema_decay = 0.99;
  double beta = 0.25;
  std::size_t dead_code_patience = 2;
  bool freeze_phi = false;
  bool domain_branch = false;
  double domain_weight = 1.0;  // multiplies the lambda schedule
  std::size_t text_rows = 16;  // text-domain rows per step
  std::uint64_t seed = 0;

  void validate() const;
};

Json to_json_value(const TokenizerConfig& c);
void from_json_into_struct(const Json& j, TokenizerConfig& c);

// lambda = 2 / (1 + exp(-10 step / total)) - 1, rising from 0 towards 1.
double lambda_at(std::size_t step, std::size_t total_steps);

// Pearson correlation; 0 when either side has zero variance.
double pcc(std::span<const double> x, std::span<const double> y);

/// Analysis windows cut into patches.
struct WindowSet {
  std::size_t n_channels = 0, steps = 0, patch_len = 0;
  std::vector<double> patches;       // [window][channel][t][P]
  std::vector<std::uint8_t> padded;  // [window][channel][t]
  std::vector<std::optional<int>> labels;
  std::vector<signalio::Split> split;
  std::vector<std::size_t> source;  // segment index per window

  std::size_t size() const { return labels.size(); }
  std::size_t rows_per_window() const { return n_channels * steps; }
  const double* patch(std::size_t w, std::size_t ch, std::size_t t) const {
    return patches.data() + ((w * n_channels + ch) * steps + t) * patch_len;
  }
  void append(const signalio::EegSegment& seg, std::optional<int> label, signalio::Split split,
              std::size_t window_len, std::size_t patch_len);
  std::vector<std::size_t> indices(signalio::Split s) const;
};

// Reads and patchifies every manifest entry (segments are used as stored).
WindowSet load_windows(const std::string& manifest_path, std::size_t window_len, std::size_t patch_len);

/// Per-term values of the compound loss; `total` carries the graph.
struct LossTerms {
  nn::Tensor total;
  double time = 0.0, freq = 0.0, commit = 0.0, domain = 0.0;
};

// Sum over elements, mean over `batch`. Rows with weight 0 (padded
// patches) contribute nothing.
//   time   : sum w ||eeg_hat - eeg||^2
//   freq   : sum w ||fre_hat - fre||^2
//   commit : sum w (||f_hat - sg(f)||^2 + beta ||f - sg(f_hat)||^2)
//   domain : lambda * mean cross-entropy of domain_logits (skipped when
//            domain_logits is undefined)
struct LossInputs {
  nn::Tensor eeg_hat;
  std::span<const double> eeg;
  nn::Tensor fre_hat;
  std::span<const double> fre;
  nn::Tensor f;
  nn::Tensor f_hat;
  std::span<const double> row_weight;
  std::size_t batch = 1;
  double beta = 0.25;
  nn::Tensor domain_logits;
  std::span<const std::size_t> domain_labels;
  double lambda = 0.0;
};
LossTerms compound_loss(const LossInputs& in);

/// Encoder, quantizer state and both decoders.
class TokenizerModel {
 public:
  TokenizerModel() = default;
  explicit TokenizerModel(const TokenizerConfig& cfg);

  const TokenizerConfig& config() const { return cfg_; }
  const bth::Hierarchy& hierarchy() const { return h_; }
  const bth::ScaleSubset& subset() const { return subset_; }
  vq::Codebook& codebook() { return cb_; }
  const vq::Codebook& codebook() const { return cb_; }
  vq::RefineMaps& refine() { return phi_; }
  const vq::RefineMaps& refine() const { return phi_; }

  // Trainable parameters: encoder, phi (unless frozen), decoders, and the
  // domain head when the branch is enabled.
  nn::ParamList parameters() const;

  // Continuous features [n_win * N * T, C] for windows `ids`.
  nn::Tensor encode_features(const WindowSet& data, std::span<const std::size_t> ids) const;
  // Residual quantization of every window; rows follow encode_features.
  std::vector<vq::MultiScaleTokens> quantize(std::span<const double> f, std::size_t n_win,
                                             std::vector<vq::EncodeTrace>* traces = nullptr) const;
  // sum over scales of broadcast phi_s(lookup(r_s)), tracked for phi.
  nn::Tensor quantized_features(const std::vector<vq::MultiScaleTokens>& tokens) const;
  nn::Tensor decode_time(const nn::Tensor& f_hat, std::size_t n_win) const;
  nn::Tensor decode_freq(const nn::Tensor& f_hat, std::size_t n_win) const;
  nn::Tensor domain_logits(const nn::Tensor& rows) const;
  nn::Tensor text_features(std::span<const std::size_t> chars) const;

  // Tokens for one window (no gradients involved).
  vq::MultiScaleTokens tokenize(const WindowSet& data, std::size_t w) const;
  // Time-domain reconstruction [N * T, P] of one window through the codes.
  std::vector<double> reconstruct(const WindowSet& data, std::size_t w) const;

  void save(const std::string& dir) const;
  static TokenizerModel load(const std::string& dir);

 private:
  nn::Tensor embed(const nn::Tensor& x, const nn::Tensor& chan, const nn::Tensor& time, std::size_t n_win) const;

  TokenizerConfig cfg_;
  bth::Hierarchy h_;
  bth::ScaleSubset subset_;
  std::size_t n_ = 0, t_ = 0;
  nn::Conv1d conv1_, conv2_, conv3_;
  nn::Linear enc_in_, enc_out_;
  nn::Tensor enc_chan_, enc_time_;
  nn::Transformer enc_;
  vq::Codebook cb_;
  vq::RefineMaps phi_;
  struct Decoder {
    nn::Linear in, out;
    nn::Tensor chan, time;
    nn::Transformer trunk;
  };
  Decoder dec_time_, dec_freq_;
  nn::Linear domain_head_;
  nn::Tensor text_table_;  // fixed character embeddings of the text domain
};

struct ForwardOutputs {
  LossTerms loss;
  std::vector<vq::MultiScaleTokens> tokens;
  std::vector<vq::EncodeTrace> traces;
};

// Loss of one batch of windows through the straight-through path. The
// domain term is built only when the branch is enabled; `text_chars` are
// the text-domain rows.
ForwardOutputs forward_batch(const TokenizerModel& m, const WindowSet& data, std::span<const std::size_t> ids,
                             double lambda, std::span<const std::size_t> text_chars = {});

struct ReportRow {
  std::size_t step = 0;
  double total = 0, time = 0, freq = 0, commit = 0, domain = 0, lambda = 0;
  std::optional<double> pcc_val;
};

struct TrainResult {
  TokenizerModel model;
  std::vector<ReportRow> report;
  double final_pcc = 0.0;
};

// Validation PCC over all unpadded samples of the windows `ids`.
double evaluate_pcc(const TokenizerModel& m, const WindowSet& data, std::span<const std::size_t> ids);

// Trains on the Train split; PCC on the Val split at every epoch end and
// after the last step. Throws on a non-finite loss.
TrainResult train_tokenizer(const WindowSet& data, const TokenizerConfig& cfg,
                            const std::function<void(const ReportRow&)>& on_step = {});
TrainResult train_tokenizer(const std::string& manifest_path, const TokenizerConfig& cfg);

void write_report(const std::string& path, const std::vector<ReportRow>& rows);

}  // namespace thdbar::tokenizer
