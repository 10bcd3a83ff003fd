// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <random>
#include <span>
#include <string>
#include <vector>

#include "thdbar/nn/ops.hpp"

namespace thdbar::nn {

struct NamedParam {
  std::string name;
  Tensor tensor;
};
using ParamList = std::vector<NamedParam>;

using Rng = std::mt19937_64;

Tensor normal_param(Shape shape, double stddev, Rng& rng);
Tensor const_param(Shape shape, double v);

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, double stddev = 0.02);
  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
  void collect(const std::string& prefix, ParamList& out) const;
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t d);
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }
  void collect(const std::string& prefix, ParamList& out) const;
};

struct Conv1d {
  std::size_t in_channels = 0, out_channels = 0, kernel = 0, stride = 1, pad = 0;
  Tensor weight;  // [kernel*in, out]
  Tensor bias;

  Conv1d() = default;
  Conv1d(std::size_t in, std::size_t out, std::size_t k, std::size_t s, std::size_t p, Rng& rng);
  std::size_t out_length(std::size_t len) const { return (len + 2 * pad - kernel) / stride + 1; }
  Tensor operator()(const Tensor& x) const { return conv1d(x, weight, bias, kernel, stride, pad); }
  void collect(const std::string& prefix, ParamList& out) const;
};

struct TransformerSpec {
  std::size_t layers = 2;
  std::size_t hidden = 64;
  std::size_t mlp = 128;
  std::size_t heads = 4;

  void validate() const;
};

// Pre-norm block: x + attn(ln(x)), then x + mlp(ln(x)).
struct TransformerBlock {
  std::size_t heads = 1;
  LayerNorm ln1, ln2;
  Linear qkv, proj, fc1, fc2;

  TransformerBlock() = default;
  TransformerBlock(const TransformerSpec& spec, Rng& rng);
  Tensor operator()(const Tensor& x, std::size_t batch, std::size_t length, const AttentionMask& mask,
                    std::span<const std::uint8_t> key_valid = {}) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

struct Transformer {
  TransformerSpec spec;
  std::vector<TransformerBlock> blocks;
  LayerNorm final_norm;

  Transformer() = default;
  Transformer(const TransformerSpec& spec, Rng& rng);
  // x: [batch*length, hidden]. Output position i depends only on inputs at
  // positions j with mask(i, j) (transitively through the layers).
  Tensor operator()(const Tensor& x, std::size_t batch, std::size_t length, const AttentionMask& mask,
                    std::span<const std::uint8_t> key_valid = {}) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

// One-sided magnitude spectrum |X_k| / P, k = 0..P/2, for even P.
std::vector<double> dft_magnitude(std::span<const double> patch);

}  // namespace thdbar::nn
