// SPDX-License-Identifier: Apache-2.0
#include "thdbar/nn/layers.hpp"

#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>

#include "thdbar/error.hpp"

namespace thdbar::nn {

Tensor normal_param(Shape shape, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(numel(shape));
  for (auto& e : v) e = dist(rng);
  return Tensor::parameter(std::move(shape), std::move(v));
}

Tensor const_param(Shape shape, double v) {
  auto n = numel(shape);
  return Tensor::parameter(std::move(shape), std::vector<double>(n, v));
}

Linear::Linear(std::size_t in, std::size_t out, Rng& rng, double stddev)
    : weight(normal_param({in, out}, stddev, rng)), bias(const_param({out}, 0.0)) {}

void Linear::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

LayerNorm::LayerNorm(std::size_t d) : gamma(const_param({d}, 1.0)), beta(const_param({d}, 0.0)) {}

void LayerNorm::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".gamma", gamma});
  out.push_back({prefix + ".beta", beta});
}

Conv1d::Conv1d(std::size_t in, std::size_t out, std::size_t k, std::size_t s, std::size_t p, Rng& rng)
    : in_channels(in), out_channels(out), kernel(k), stride(s), pad(p),
      weight(normal_param({k * in, out}, 1.0 / std::sqrt(static_cast<double>(k * in)), rng)),
      bias(const_param({out}, 0.0)) {}

void Conv1d::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

void TransformerSpec::validate() const {
  if (heads == 0 || hidden % heads != 0) {
    throw ConfigError("hidden size " + std::to_string(hidden) + " not divisible by heads " + std::to_string(heads));
  }
  if (layers == 0 || mlp == 0) throw ConfigError("transformer needs at least one layer and a non-empty MLP");
}

TransformerBlock::TransformerBlock(const TransformerSpec& spec, Rng& rng)
    : heads(spec.heads), ln1(spec.hidden), ln2(spec.hidden),
      qkv(spec.hidden, 3 * spec.hidden, rng),
      proj(spec.hidden, spec.hidden, rng, 0.02 / std::sqrt(2.0 * static_cast<double>(spec.layers))),
      fc1(spec.hidden, spec.mlp, rng),
      fc2(spec.mlp, spec.hidden, rng, 0.02 / std::sqrt(2.0 * static_cast<double>(spec.layers))) {}

Tensor TransformerBlock::operator()(const Tensor& x, std::size_t batch, std::size_t length, const AttentionMask& mask,
                                    std::span<const std::uint8_t> key_valid) const {
  Tensor a = attention(qkv(ln1(x)), batch, length, heads, mask, key_valid);
  Tensor h = add(x, proj(a));
  return add(h, fc2(gelu(fc1(ln2(h)))));
}

void TransformerBlock::collect(const std::string& prefix, ParamList& out) const {
  ln1.collect(prefix + ".ln1", out);
  qkv.collect(prefix + ".qkv", out);
  proj.collect(prefix + ".proj", out);
  ln2.collect(prefix + ".ln2", out);
  fc1.collect(prefix + ".fc1", out);
  fc2.collect(prefix + ".fc2", out);
}

Transformer::Transformer(const TransformerSpec& s, Rng& rng) : spec(s), final_norm(s.hidden) {
  spec.validate();
  for (std::size_t i = 0; i < spec.layers; ++i) blocks.emplace_back(spec, rng);
}

Tensor Transformer::operator()(const Tensor& x, std::size_t batch, std::size_t length, const AttentionMask& mask,
                               std::span<const std::uint8_t> key_valid) const {
  Tensor h = x;
  for (const auto& b : blocks) h = b(h, batch, length, mask, key_valid);
  return final_norm(h);
}

void Transformer::collect(const std::string& prefix, ParamList& out) const {
  for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(prefix + ".block" + std::to_string(i), out);
  final_norm.collect(prefix + ".ln_f", out);
}

namespace {

struct TwiddleTable {
  std::vector<double> cos_t, sin_t;
};

const TwiddleTable& twiddles(std::size_t p) {
  static std::mutex mu;
  static std::map<std::size_t, std::unique_ptr<TwiddleTable>> cache;
  std::lock_guard lock(mu);
  auto& slot = cache[p];
  if (!slot) {
    slot = std::make_unique<TwiddleTable>();
    slot->cos_t.resize(p);
    slot->sin_t.resize(p);
    for (std::size_t i = 0; i < p; ++i) {
      const double a = 2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(p);
      slot->cos_t[i] = std::cos(a);
      slot->sin_t[i] = std::sin(a);
    }
  }
  return *slot;
}

}  // namespace

std::vector<double> dft_magnitude(std::span<const double> patch) {
  const std::size_t p = patch.size();
  if (p == 0 || p % 2 != 0) throw ShapeError("shape mismatch: dft_magnitude needs an even, non-empty patch");
  const auto& tw = twiddles(p);
  std::vector<double> mag(p / 2 + 1);
  for (std::size_t k = 0; k <= p / 2; ++k) {
    double re = 0.0, im = 0.0;
    std::size_t idx = 0;
    for (std::size_t n = 0; n < p; ++n) {
      re += patch[n] * tw.cos_t[idx];
      im -= patch[n] * tw.sin_t[idx];
      idx += k;
      if (idx >= p) idx -= p;
    }
    mag[k] = std::sqrt(re * re + im * im) / static_cast<double>(p);
  }
  return mag;
}

}  // namespace thdbar::nn
