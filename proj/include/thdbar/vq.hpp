// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "thdbar/bth.hpp"
#include "thdbar/nn/layers.hpp"

namespace thdbar::vq {

using bth::FeatureMap;
using Token = std::uint32_t;

/// V code vectors of dimension C shared by every scale, with the running
/// statistics of the EMA update (count-normalised: row = sum / count).
struct Codebook {
  std::size_t V = 0, C = 0;
  std::vector<double> vectors;       // [V x C]
  std::vector<double> ema_count;     // [V]
  std::vector<double> ema_sum;       // [V x C]
  std::vector<std::size_t> usage;    // assignments in the current epoch
  std::vector<std::size_t> idle_epochs;

  Codebook() = default;
  // Rows as given; EMA state starts at count 1, sum = row.
  Codebook(std::size_t v, std::size_t c, std::vector<double> rows);
  static Codebook random(std::size_t v, std::size_t c, std::mt19937_64& rng, double stddev = 1.0);

  const double* row(Token k) const { return vectors.data() + static_cast<std::size_t>(k) * C; }
  void validate() const;
};

// Tokens of one scale, [groups x steps].
struct TokenMap {
  std::size_t scale = 0;
  std::size_t groups = 0, steps = 0;
  std::vector<Token> tokens;

  TokenMap() = default;
  TokenMap(std::size_t s, std::size_t g, std::size_t t) : scale(s), groups(g), steps(t), tokens(g * t, 0) {}
  Token& at(std::size_t g, std::size_t t) { return tokens[g * steps + t]; }
  Token at(std::size_t g, std::size_t t) const { return tokens[g * steps + t]; }
  bool operator==(const TokenMap&) const = default;
};

struct MultiScaleTokens {
  std::vector<TokenMap> maps;  // one per selected scale, coarse to fine
  std::size_t steps = 0;

  bth::ScaleSubset subset() const;
  // Throws unless shapes follow `h` and every token is < V.
  void validate(const bth::Hierarchy& h, std::size_t V) const;
  bool operator==(const MultiScaleTokens&) const = default;
};

/// Per selected scale, a kernel-3 same-padded temporal convolution C -> C
/// (phi_s), shared by encoding and decoding.
struct RefineMaps {
  std::size_t C = 0;
  std::vector<std::size_t> scales;
  std::vector<nn::Conv1d> convs;

  RefineMaps() = default;
  // Identity kernels, zero bias.
  static RefineMaps identity(const bth::ScaleSubset& subset, std::size_t C);
  std::size_t index_of(std::size_t scale) const;
  // phi for the given scale on a [G x T x C] map (no gradient tracking).
  FeatureMap apply(std::size_t scale, const FeatureMap& z) const;
  void collect(const std::string& prefix, nn::ParamList& out) const;
};

// Nearest code by squared Euclidean distance; ties go to the lowest index.
// Throws on non-finite features.
TokenMap quantize(const FeatureMap& f, const Codebook& cb, std::size_t scale = 0);
Token nearest_code(const double* x, const Codebook& cb);
FeatureMap lookup(const Codebook& cb, const TokenMap& tokens);

// Intermediate values of the residual loop, one entry per selected scale.
struct EncodeTrace {
  std::vector<FeatureMap> residual_before;  // finest-scale residual entering scale k
  std::vector<FeatureMap> pooled;           // downscaled residual that was quantized
  std::vector<FeatureMap> contribution;     // phi_s(upscale(lookup(r_s)))
  FeatureMap residual_after;
};

// Residual quantization over the selected scales, coarse to fine:
//   r_s = quantize(downscale(resid)); z_s = upscale(lookup(r_s));
//   resid -= phi_s(z_s).
// f is at the finest hierarchy scale.
MultiScaleTokens encode_multiscale(const FeatureMap& f, const bth::Hierarchy& h, const bth::ScaleSubset& subset,
                                   const Codebook& cb, const RefineMaps& phi, EncodeTrace* trace = nullptr);
// sum over the first `upto` maps (all by default) of phi_s(upscale(lookup(r_s))).
FeatureMap decode_multiscale(const MultiScaleTokens& R, const bth::Hierarchy& h, const Codebook& cb,
                             const RefineMaps& phi, std::optional<std::size_t> upto = std::nullopt);

struct CodebookStep {
  double commitment = 0.0;   // beta * mean ||x - code||^2 over the batch rows
  std::size_t assigned = 0;  // rows in the batch
};

// One EMA update from rows `features` ([n x C]) assigned to `tokens`:
//   count_k <- d count_k + (1-d) n_k ; sum_k <- d sum_k + (1-d) sum x ;
//   row_k <- sum_k / count_k.
// The commitment value is measured against the rows before the update.
CodebookStep codebook_train_step(Codebook& cb, std::span<const double> features, std::span<const Token> tokens,
                                 double decay = 0.99, double beta = 0.25);
// Closes an epoch: codes unused for `patience` consecutive epochs are
// reseeded to random rows of `features` ([n x C]). Returns the number of
// reseeded codes.
std::size_t end_epoch(Codebook& cb, std::span<const double> features, std::mt19937_64& rng,
                      std::size_t patience = 2);

// Codebook container: "THCB", u32 version, u32 V, u32 C, u32 n_phi, per phi
// u32 scale, then float32 rows [V x C], then per phi float32 weight
// [3C x C] and bias [C]. Little-endian.
void write_codebook(const std::string& path, const Codebook& cb, const RefineMaps& phi);
std::pair<Codebook, RefineMaps> read_codebook(const std::string& path);

/// A tokenized corpus: one MultiScaleTokens per analysis window.
struct TokenCorpus {
  std::string scheme;
  std::vector<std::size_t> group_counts;  // per hierarchy scale
  std::vector<std::size_t> scales;        // selected, zero-based
  std::size_t steps = 0;
  std::size_t V = 0;
  std::vector<MultiScaleTokens> sequences;
  std::vector<std::optional<int>> labels;
  std::vector<std::uint8_t> split;  // 0 train, 1 val, 2 test

  std::size_t records_per_sequence() const;
};

// Token file: "THTK", u32 version, u32 V, u32 T, u16 scheme length + bytes,
// u8 hierarchy scales + u16 group counts, u8 selected scales + u8 indices,
// u32 sequence count; then per sequence i32 label (-1 none), u8 split and
// records of packed (t u16, scale u8, group u16, token u16) in
// (t, scale, group) order.
void write_tokens(const std::string& path, const TokenCorpus& corpus);
TokenCorpus read_tokens(const std::string& path);

}  // namespace thdbar::vq
