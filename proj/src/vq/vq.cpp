// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <limits>

#include "../binio.hpp"
#include "thdbar/error.hpp"
#include "thdbar/vq.hpp"

namespace thdbar::vq {

Codebook::Codebook(std::size_t v, std::size_t c, std::vector<double> rows)
    : V(v), C(c), vectors(std::move(rows)), ema_count(v, 1.0), usage(v, 0), idle_epochs(v, 0) {
  validate();
  ema_sum = vectors;
}

Codebook Codebook::random(std::size_t v, std::size_t c, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> rows(v * c);
  for (auto& x : rows) x = dist(rng);
  return Codebook(v, c, std::move(rows));
}

void Codebook::validate() const {
  if (V < 2) throw ConfigError("codebook needs V >= 2");
  if (C == 0) throw ConfigError("codebook needs C >= 1");
  if (V > 65536) throw ConfigError("codebook size above 65536 does not fit the token file format");
  if (vectors.size() != V * C) throw ShapeError("codebook rows do not match V x C");
  for (double x : vectors)
    if (!std::isfinite(x)) throw Error("codebook holds a non-finite value");
}

bth::ScaleSubset MultiScaleTokens::subset() const {
  bth::ScaleSubset s;
  for (const auto& m : maps) s.scales.push_back(m.scale);
  return s;
}

void MultiScaleTokens::validate(const bth::Hierarchy& h, std::size_t V) const {
  subset().validate(h);
  for (const auto& m : maps) {
    if (m.groups != h.groups(m.scale) || m.steps != steps || m.tokens.size() != m.groups * m.steps)
      throw ShapeError("token map shape does not match the hierarchy at S" + std::to_string(m.scale + 1));
    for (auto t : m.tokens)
      if (t >= V) throw Error("token " + std::to_string(t) + " out of range for V = " + std::to_string(V));
  }
}

RefineMaps RefineMaps::identity(const bth::ScaleSubset& subset, std::size_t C) {
  RefineMaps r;
  r.C = C;
  r.scales = subset.scales;
  for (std::size_t i = 0; i < subset.size(); ++i) {
    nn::Conv1d conv;
    conv.in_channels = conv.out_channels = C;
    conv.kernel = 3;
    conv.stride = 1;
    conv.pad = 1;
    std::vector<double> w(3 * C * C, 0.0);
    for (std::size_t c = 0; c < C; ++c) w[(1 * C + c) * C + c] = 1.0;
    conv.weight = nn::Tensor::parameter({3 * C, C}, std::move(w));
    conv.bias = nn::Tensor::parameter({C}, std::vector<double>(C, 0.0));
    r.convs.push_back(std::move(conv));
  }
  return r;
}

std::size_t RefineMaps::index_of(std::size_t scale) const {
  for (std::size_t i = 0; i < scales.size(); ++i)
    if (scales[i] == scale) return i;
  throw Error("scale mismatch: no refinement map for S" + std::to_string(scale + 1));
}

FeatureMap RefineMaps::apply(std::size_t scale, const FeatureMap& z) const {
  if (z.dim != C) throw ShapeError("refinement map expects C = " + std::to_string(C));
  const auto& conv = convs[index_of(scale)];
  auto x = nn::Tensor::constant({z.groups, z.steps, z.dim}, z.values);
  auto y = nn::conv1d(x, nn::detach(conv.weight), nn::detach(conv.bias), 3, 1, 1);
  FeatureMap out(z.groups, z.steps, z.dim);
  std::copy(y.value().begin(), y.value().end(), out.values.begin());
  return out;
}

void RefineMaps::collect(const std::string& prefix, nn::ParamList& out) const {
  for (std::size_t i = 0; i < convs.size(); ++i) convs[i].collect(prefix + "phi" + std::to_string(scales[i] + 1), out);
}

Token nearest_code(const double* x, const Codebook& cb) {
  Token best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < cb.V; ++k) {
    const double* r = cb.row(static_cast<Token>(k));
    double d = 0.0;
    for (std::size_t c = 0; c < cb.C; ++c) {
      const double e = x[c] - r[c];
      d += e * e;
    }
    if (d < best_d) {
      best_d = d;
      best = static_cast<Token>(k);
    }
  }
  return best;
}

TokenMap quantize(const FeatureMap& f, const Codebook& cb, std::size_t scale) {
  if (f.dim != cb.C) throw ShapeError("feature dimension " + std::to_string(f.dim) + " != codebook C " + std::to_string(cb.C));
  for (double v : f.values)
    if (!std::isfinite(v)) throw Error("non-finite features passed to quantize");
  TokenMap out(scale, f.groups, f.steps);
  for (std::size_t g = 0; g < f.groups; ++g)
    for (std::size_t t = 0; t < f.steps; ++t) out.at(g, t) = nearest_code(f.row(g, t), cb);
  return out;
}

FeatureMap lookup(const Codebook& cb, const TokenMap& tokens) {
  FeatureMap out(tokens.groups, tokens.steps, cb.C);
  for (std::size_t g = 0; g < tokens.groups; ++g)
    for (std::size_t t = 0; t < tokens.steps; ++t) {
      const Token k = tokens.at(g, t);
      if (k >= cb.V) throw Error("token " + std::to_string(k) + " >= V");
      std::copy_n(cb.row(k), cb.C, out.row(g, t));
    }
  return out;
}

// phi_s commutes with the broadcast (it acts on each group's time series
// independently), so it is evaluated on the coarse map and then upscaled;
// the values equal phi_s(upscale(.)) bit for bit.
static FeatureMap contribution(const TokenMap& r, const bth::Hierarchy& h, const Codebook& cb, const RefineMaps& phi) {
  return bth::upscale(phi.apply(r.scale, lookup(cb, r)), h, r.scale, h.finest());
}

MultiScaleTokens encode_multiscale(const FeatureMap& f, const bth::Hierarchy& h, const bth::ScaleSubset& subset,
                                   const Codebook& cb, const RefineMaps& phi, EncodeTrace* trace) {
  subset.validate(h);
  if (f.groups != h.groups(h.finest()))
    throw ShapeError("encode expects features at the finest scale (" + std::to_string(h.groups(h.finest())) + " groups)");
  if (phi.scales != subset.scales) throw Error("scale mismatch between refinement maps and subset");
  MultiScaleTokens out;
  out.steps = f.steps;
  FeatureMap resid = f;
  if (trace) *trace = {};
  for (auto s : subset.scales) {
    auto pooled = bth::downscale(resid, h, h.finest(), s);
    auto r = quantize(pooled, cb, s);
    auto c = contribution(r, h, cb, phi);
    if (trace) {
      trace->residual_before.push_back(resid);
      trace->pooled.push_back(std::move(pooled));
      trace->contribution.push_back(c);
    }
    for (std::size_t i = 0; i < resid.values.size(); ++i) resid.values[i] -= c.values[i];
    out.maps.push_back(std::move(r));
  }
  if (trace) trace->residual_after = std::move(resid);
  return out;
}

FeatureMap decode_multiscale(const MultiScaleTokens& R, const bth::Hierarchy& h, const Codebook& cb,
                             const RefineMaps& phi, std::optional<std::size_t> upto) {
  const std::size_t n = std::min(upto.value_or(R.maps.size()), R.maps.size());
  R.validate(h, cb.V);
  FeatureMap out(h.groups(h.finest()), R.steps, cb.C);
  for (std::size_t k = 0; k < n; ++k) {
    auto c = contribution(R.maps[k], h, cb, phi);
    for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] += c.values[i];
  }
  return out;
}

CodebookStep codebook_train_step(Codebook& cb, std::span<const double> features, std::span<const Token> tokens,
                                 double decay, double beta) {
  if (tokens.empty()) throw Error("empty batch in codebook update");
  if (features.size() != tokens.size() * cb.C) throw ShapeError("codebook update: features do not match tokens");
  CodebookStep res;
  res.assigned = tokens.size();
  std::vector<double> n(cb.V, 0.0), s(cb.V * cb.C, 0.0);
  double commit = 0.0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const Token k = tokens[i];
    if (k >= cb.V) throw Error("token out of range in codebook update");
    const double* x = features.data() + i * cb.C;
    const double* r = cb.row(k);
    n[k] += 1.0;
    for (std::size_t c = 0; c < cb.C; ++c) {
      s[k * cb.C + c] += x[c];
      commit += (x[c] - r[c]) * (x[c] - r[c]);
    }
    ++cb.usage[k];
  }
  res.commitment = beta * commit / static_cast<double>(tokens.size());
  for (std::size_t k = 0; k < cb.V; ++k) {
    cb.ema_count[k] = decay * cb.ema_count[k] + (1.0 - decay) * n[k];
    for (std::size_t c = 0; c < cb.C; ++c) {
      auto& m = cb.ema_sum[k * cb.C + c];
      m = decay * m + (1.0 - decay) * s[k * cb.C + c];
      cb.vectors[k * cb.C + c] = m / cb.ema_count[k];
    }
  }
  return res;
}

std::size_t end_epoch(Codebook& cb, std::span<const double> features, std::mt19937_64& rng, std::size_t patience) {
  const std::size_t rows = features.size() / cb.C;
  std::size_t reseeded = 0;
  for (std::size_t k = 0; k < cb.V; ++k) {
    cb.idle_epochs[k] = cb.usage[k] == 0 ? cb.idle_epochs[k] + 1 : 0;
    cb.usage[k] = 0;
    if (cb.idle_epochs[k] >= patience && rows > 0) {
      const auto pick = std::uniform_int_distribution<std::size_t>(0, rows - 1)(rng);
      std::copy_n(features.data() + pick * cb.C, cb.C, cb.vectors.data() + k * cb.C);
      std::copy_n(features.data() + pick * cb.C, cb.C, cb.ema_sum.data() + k * cb.C);
      cb.ema_count[k] = 1.0;
      cb.idle_epochs[k] = 0;
      ++reseeded;
    }
  }
  return reseeded;
}

namespace {

constexpr std::uint32_t kCodebookVersion = 1;
constexpr std::uint32_t kTokenVersion = 1;

void put_floats(detail::ByteWriter& w, std::span<const double> v) {
  for (double x : v) w.put<float>(static_cast<float>(x));
}

std::vector<double> get_floats(detail::ByteReader& r, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = r.get<float>();
  return v;
}

}  // namespace

void write_codebook(const std::string& path, const Codebook& cb, const RefineMaps& phi) {
  cb.validate();
  detail::ByteWriter w;
  w.bytes("THCB", 4);
  w.put<std::uint32_t>(kCodebookVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(cb.V));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(cb.C));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(phi.scales.size()));
  for (auto s : phi.scales) w.put<std::uint32_t>(static_cast<std::uint32_t>(s));
  put_floats(w, cb.vectors);
  for (const auto& c : phi.convs) {
    put_floats(w, c.weight.value());
    put_floats(w, c.bias.value());
  }
  w.save(path);
}

std::pair<Codebook, RefineMaps> read_codebook(const std::string& path) {
  auto r = detail::ByteReader::load(path);
  if (r.str(4) != "THCB") throw FormatError("malformed header: not a codebook file: " + path);
  if (auto v = r.get<std::uint32_t>(); v != kCodebookVersion)
    throw FormatError("unknown format version " + std::to_string(v) + ": " + path);
  const std::size_t V = r.get<std::uint32_t>(), C = r.get<std::uint32_t>(), n_phi = r.get<std::uint32_t>();
  if (V < 2 || C == 0 || V > 65536 || C > 65536 || n_phi > 64) throw FormatError("malformed header: " + path);
  bth::ScaleSubset subset;
  for (std::size_t i = 0; i < n_phi; ++i) subset.scales.push_back(r.get<std::uint32_t>());
  r.need(V * C * 4);
  Codebook cb(V, C, get_floats(r, V * C));
  auto phi = RefineMaps::identity(subset, C);
  for (auto& c : phi.convs) {
    auto w = get_floats(r, 3 * C * C);
    auto b = get_floats(r, C);
    std::copy(w.begin(), w.end(), c.weight.value().begin());
    std::copy(b.begin(), b.end(), c.bias.value().begin());
  }
  if (!r.done()) throw FormatError("trailing bytes in codebook file: " + path);
  return {std::move(cb), std::move(phi)};
}

std::size_t TokenCorpus::records_per_sequence() const {
  std::size_t g = 0;
  for (auto s : scales) g += group_counts.at(s);
  return g * steps;
}

void write_tokens(const std::string& path, const TokenCorpus& corpus) {
  if (corpus.V > 65536) throw ConfigError("token ids above 65535 do not fit the token file format");
  if (corpus.steps > 65536) throw ConfigError("too many patches per window for the token file format");
  if (corpus.labels.size() != corpus.sequences.size() || corpus.split.size() != corpus.sequences.size())
    throw ShapeError("token corpus labels/splits do not match its sequences");
  detail::ByteWriter w;
  w.bytes("THTK", 4);
  w.put<std::uint32_t>(kTokenVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(corpus.V));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(corpus.steps));
  w.put<std::uint16_t>(static_cast<std::uint16_t>(corpus.scheme.size()));
  w.bytes(corpus.scheme.data(), corpus.scheme.size());
  w.put<std::uint8_t>(static_cast<std::uint8_t>(corpus.group_counts.size()));
  for (auto g : corpus.group_counts) w.put<std::uint16_t>(static_cast<std::uint16_t>(g));
  w.put<std::uint8_t>(static_cast<std::uint8_t>(corpus.scales.size()));
  for (auto s : corpus.scales) w.put<std::uint8_t>(static_cast<std::uint8_t>(s));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(corpus.sequences.size()));
  for (std::size_t i = 0; i < corpus.sequences.size(); ++i) {
    const auto& seq = corpus.sequences[i];
    if (seq.steps != corpus.steps || seq.maps.size() != corpus.scales.size())
      throw ShapeError("token sequence does not match the corpus layout");
    w.put<std::int32_t>(corpus.labels[i] ? *corpus.labels[i] : -1);
    w.put<std::uint8_t>(corpus.split[i]);
    for (std::size_t t = 0; t < corpus.steps; ++t)
      for (const auto& m : seq.maps)
        for (std::size_t g = 0; g < m.groups; ++g) {
          w.put<std::uint16_t>(static_cast<std::uint16_t>(t));
          w.put<std::uint8_t>(static_cast<std::uint8_t>(m.scale));
          w.put<std::uint16_t>(static_cast<std::uint16_t>(g));
          w.put<std::uint16_t>(static_cast<std::uint16_t>(m.at(g, t)));
        }
  }
  w.save(path);
}

TokenCorpus read_tokens(const std::string& path) {
  auto r = detail::ByteReader::load(path);
  if (r.str(4) != "THTK") throw FormatError("malformed header: not a token file: " + path);
  if (auto v = r.get<std::uint32_t>(); v != kTokenVersion)
    throw FormatError("unknown format version " + std::to_string(v) + ": " + path);
  TokenCorpus c;
  c.V = r.get<std::uint32_t>();
  c.steps = r.get<std::uint32_t>();
  c.scheme = r.str(r.get<std::uint16_t>());
  const std::size_t n_scales = r.get<std::uint8_t>();
  for (std::size_t i = 0; i < n_scales; ++i) c.group_counts.push_back(r.get<std::uint16_t>());
  const std::size_t n_sel = r.get<std::uint8_t>();
  for (std::size_t i = 0; i < n_sel; ++i) {
    c.scales.push_back(r.get<std::uint8_t>());
    if (c.scales.back() >= n_scales) throw FormatError("token file selects a scale outside its hierarchy");
  }
  const std::size_t n_seq = r.get<std::uint32_t>();
  for (std::size_t i = 0; i < n_seq; ++i) {
    const auto label = r.get<std::int32_t>();
    c.labels.push_back(label < 0 ? std::nullopt : std::optional<int>(label));
    c.split.push_back(r.get<std::uint8_t>());
    MultiScaleTokens seq;
    seq.steps = c.steps;
    for (auto s : c.scales) seq.maps.emplace_back(s, c.group_counts[s], c.steps);
    for (std::size_t t = 0; t < c.steps; ++t)
      for (auto& m : seq.maps)
        for (std::size_t g = 0; g < m.groups; ++g) {
          const std::size_t rt = r.get<std::uint16_t>(), rs = r.get<std::uint8_t>(), rg = r.get<std::uint16_t>();
          const Token tok = r.get<std::uint16_t>();
          if (rt != t || rs != m.scale || rg != g) throw FormatError("token records out of order in " + path);
          if (tok >= c.V) throw FormatError("token id out of range in " + path);
          m.at(g, t) = tok;
        }
    c.sequences.push_back(std::move(seq));
  }
  if (!r.done()) throw FormatError("trailing bytes in token file: " + path);
  return c;
}

}  // namespace thdbar::vq
