// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "thdbar/dsp.hpp"
#include "thdbar/error.hpp"
#include "thdbar/tokenizer.hpp"

namespace thdbar::tokenizer {

namespace {

constexpr std::size_t kConvChannels = 16;
constexpr std::size_t kTextChars = 95;  // printable ASCII 32..126

bth::ScaleSubset make_subset(const TokenizerConfig& cfg, const bth::Hierarchy& h) {
  auto s = cfg.scales.empty() ? bth::ScaleSubset::all(h) : bth::ScaleSubset::from_one_based(cfg.scales);
  s.validate(h);
  return s;
}

}  // namespace

void TokenizerConfig::validate() const {
  if (codebook_size < 2) throw ConfigError("codebook_size must be >= 2");
  if (code_dim == 0) throw ConfigError("code_dim must be positive");
  if (patch_len == 0 || patch_len % 2 != 0) throw ConfigError("patch_len must be positive and even");
  if (patch_len > window_len) throw ConfigError("patch length P must not exceed window length W");
  if (patch_len < 15) throw ConfigError("patch_len must cover the first convolution kernel (15)");
  if (steps == 0) throw ConfigError("steps must be >= 1");
  if (batch == 0) throw ConfigError("batch must be >= 1");
  if (!(ema_decay > 0.0 && ema_decay < 1.0)) throw ConfigError("ema_decay must lie in (0, 1)");
  if (!(beta >= 0.0)) throw ConfigError("beta must be >= 0");
  if (!(domain_weight >= 0.0)) throw ConfigError("domain_weight must be >= 0");
  encoder.validate();
  decoder.validate();
}

Json to_json_value(const TokenizerConfig& c) {
  return Json{{"scheme", c.scheme},
              {"scales", c.scales},
              {"codebook_size", c.codebook_size},
              {"code_dim", c.code_dim},
              {"patch_len", c.patch_len},
              {"window_len", c.window_len},
              {"encoder", nn::to_json_value(c.encoder)},
              {"decoder", nn::to_json_value(c.decoder)},
              {"steps", c.steps},
              {"batch", c.batch},
              {"optim", nn::to_json_value(c.optim)},
              {"ema_decay", c.ema_decay},
              {"beta", c.beta},
              {"dead_code_patience", c.dead_code_patience},
              {"freeze_phi", c.freeze_phi},
              {"domain_branch", c.domain_branch},
              {"domain_weight", c.domain_weight},
              {"text_rows", c.text_rows},
              {"seed", c.seed}};
}

void from_json_into_struct(const Json& j, TokenizerConfig& c) {
  reject_unknown_keys(j,
                      {"scheme", "scales", "codebook_size", "code_dim", "patch_len", "window_len", "encoder", "decoder",
                       "steps", "batch", "optim", "ema_decay", "beta", "dead_code_patience", "freeze_phi",
                       "domain_branch", "domain_weight", "text_rows", "seed"},
                      "tokenizer");
  read_key(j, "scheme", c.scheme);
  read_key(j, "scales", c.scales);
  read_key(j, "codebook_size", c.codebook_size);
  read_key(j, "code_dim", c.code_dim);
  read_key(j, "patch_len", c.patch_len);
  read_key(j, "window_len", c.window_len);
  read_key(j, "encoder", c.encoder);
  read_key(j, "decoder", c.decoder);
  read_key(j, "steps", c.steps);
  read_key(j, "batch", c.batch);
  read_key(j, "optim", c.optim);
  read_key(j, "ema_decay", c.ema_decay);
  read_key(j, "beta", c.beta);
  read_key(j, "dead_code_patience", c.dead_code_patience);
  read_key(j, "freeze_phi", c.freeze_phi);
  read_key(j, "domain_branch", c.domain_branch);
  read_key(j, "domain_weight", c.domain_weight);
  read_key(j, "text_rows", c.text_rows);
  read_key(j, "seed", c.seed);
}

double lambda_at(std::size_t step, std::size_t total_steps) {
  if (total_steps == 0) throw Error("lambda schedule needs total_steps >= 1");
  if (step > total_steps) throw Error("lambda schedule: step out of range");
  const double p = static_cast<double>(step) / static_cast<double>(total_steps);
  return 2.0 / (1.0 + std::exp(-10.0 * p)) - 1.0;
}

double pcc(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ShapeError("shape mismatch: pcc needs equal lengths");
  if (x.empty()) return 0.0;
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

// ---- windows ---------------------------------------------------------------

void WindowSet::append(const signalio::EegSegment& seg, std::optional<int> label, signalio::Split s,
                       std::size_t window_len, std::size_t plen) {
  const auto p = dsp::patchify(seg, window_len, plen);
  const auto& g = p.grid;
  if (size() == 0 && patches.empty()) {
    n_channels = g.n_channels;
    steps = g.n_patches;
    patch_len = g.patch_len;
  } else if (g.n_channels != n_channels || g.n_patches != steps || g.patch_len != patch_len) {
    throw ShapeError("dimension mismatch between segments of one window set");
  }
  const std::size_t seg_index = source.empty() ? 0 : source.back() + 1;
  patches.insert(patches.end(), p.values.begin(), p.values.end());
  padded.insert(padded.end(), g.pad_mask.begin(), g.pad_mask.end());
  for (std::size_t w = 0; w < g.n_windows; ++w) {
    labels.push_back(label);
    split.push_back(s);
    source.push_back(seg_index);
  }
}

std::vector<std::size_t> WindowSet::indices(signalio::Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < size(); ++i)
    if (split[i] == s) out.push_back(i);
  return out;
}

WindowSet load_windows(const std::string& manifest_path, std::size_t window_len, std::size_t patch_len) {
  const auto m = signalio::read_manifest(manifest_path);
  if (m.entries.empty()) throw Error("manifest is empty: " + manifest_path);
  WindowSet out;
  for (const auto& e : m.entries) {
    const auto seg = signalio::read_segment(signalio::resolve_entry(manifest_path, e));
    out.append(seg, e.label, e.split, window_len, patch_len);
  }
  return out;
}

// ---- loss -----------------------------------------------------------------

LossTerms compound_loss(const LossInputs& in) {
  if (in.batch == 0) throw ShapeError("shape mismatch: batch must be positive");
  const std::size_t rows = in.row_weight.size();
  auto check = [&](const nn::Tensor& t, std::size_t target_size, const char* what) {
    if (t.ndim() != 2 || t.dim(0) != rows || t.size() != target_size)
      throw ShapeError(std::string("shape mismatch in compound loss: ") + what);
  };
  check(in.eeg_hat, in.eeg.size(), "eeg");
  check(in.fre_hat, in.fre.size(), "spectrum");
  check(in.f, in.f_hat.size(), "features");
  if (in.f.shape() != in.f_hat.shape()) throw ShapeError("shape mismatch in compound loss: features");

  const double inv_b = 1.0 / static_cast<double>(in.batch);
  auto time = nn::scale(nn::weighted_sq_error(in.eeg_hat, in.eeg, in.row_weight), inv_b);
  auto freq = nn::scale(nn::weighted_sq_error(in.fre_hat, in.fre, in.row_weight), inv_b);
  auto f_vals = in.f.value();
  auto fh_vals = in.f_hat.value();
  const std::vector<double> f_sg(f_vals.begin(), f_vals.end());
  const std::vector<double> fh_sg(fh_vals.begin(), fh_vals.end());
  auto code_side = nn::weighted_sq_error(in.f_hat, f_sg, in.row_weight);
  auto enc_side = nn::scale(nn::weighted_sq_error(in.f, fh_sg, in.row_weight), in.beta);
  auto commit = nn::scale(nn::add(code_side, enc_side), inv_b);

  LossTerms out;
  out.time = time.item();
  out.freq = freq.item();
  out.commit = commit.item();
  out.total = nn::add(nn::add(time, freq), commit);
  if (in.domain_logits.defined()) {
    const std::size_t n = in.domain_logits.dim(0);
    if (in.domain_labels.size() != n || in.domain_logits.dim(1) != 2)
      throw ShapeError("shape mismatch in compound loss: domain labels");
    std::vector<double> w(n, 1.0 / static_cast<double>(n));
    auto ce = nn::cross_entropy(in.domain_logits, in.domain_labels, w, 0, 2);
    out.domain = ce.item();
    out.total = nn::add(out.total, nn::scale(ce, in.lambda));
  }
  return out;
}

// ---- model ----------------------------------------------------------------

TokenizerModel::TokenizerModel(const TokenizerConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  h_ = bth::load_hierarchy(cfg_.scheme);
  subset_ = make_subset(cfg_, h_);
  n_ = h_.n_channels();
  t_ = cfg_.window_len / cfg_.patch_len;
  const std::size_t C = cfg_.code_dim;
  const std::size_t hid_e = cfg_.encoder.hidden, hid_d = cfg_.decoder.hidden;

  nn::Rng rng(cfg_.seed);
  conv1_ = nn::Conv1d(1, kConvChannels, 15, 8, 7, rng);
  conv2_ = nn::Conv1d(kConvChannels, kConvChannels, 3, 1, 1, rng);
  conv3_ = nn::Conv1d(kConvChannels, kConvChannels, 3, 1, 1, rng);
  enc_in_ = nn::Linear(conv3_.out_length(conv2_.out_length(conv1_.out_length(cfg_.patch_len))) * kConvChannels, hid_e,
                       rng);
  enc_chan_ = nn::normal_param({n_, hid_e}, 0.02, rng);
  enc_time_ = nn::normal_param({t_, hid_e}, 0.02, rng);
  enc_ = nn::Transformer(cfg_.encoder, rng);
  enc_out_ = nn::Linear(hid_e, C, rng, 1.0 / std::sqrt(static_cast<double>(hid_e)));
  cb_ = vq::Codebook::random(cfg_.codebook_size, C, rng, 1.0);
  phi_ = vq::RefineMaps::identity(subset_, C);
  auto make_decoder = [&](std::size_t out_dim) {
    Decoder d;
    d.in = nn::Linear(C, hid_d, rng);
    d.chan = nn::normal_param({n_, hid_d}, 0.02, rng);
    d.time = nn::normal_param({t_, hid_d}, 0.02, rng);
    d.trunk = nn::Transformer(cfg_.decoder, rng);
    d.out = nn::Linear(hid_d, out_dim, rng);
    return d;
  };
  dec_time_ = make_decoder(cfg_.patch_len);
  dec_freq_ = make_decoder(cfg_.patch_len / 2 + 1);

  // The domain branch draws from its own stream so enabling it leaves every
  // other initial value unchanged.
  nn::Rng drng(cfg_.seed ^ 0x646f6d61696eULL);
  domain_head_ = nn::Linear(C, 2, drng);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> text(kTextChars * C);
  for (auto& v : text) v = nd(drng);
  text_table_ = nn::Tensor::constant({kTextChars, C}, std::move(text));
}

nn::ParamList TokenizerModel::parameters() const {
  nn::ParamList out;
  conv1_.collect("enc.conv1", out);
  conv2_.collect("enc.conv2", out);
  conv3_.collect("enc.conv3", out);
  enc_in_.collect("enc.in", out);
  out.push_back({"enc.chan", enc_chan_});
  out.push_back({"enc.time", enc_time_});
  enc_.collect("enc.trunk", out);
  enc_out_.collect("enc.out", out);
  if (!cfg_.freeze_phi) phi_.collect("", out);
  auto dec = [&](const Decoder& d, const std::string& p) {
    d.in.collect(p + "in", out);
    out.push_back({p + "chan", d.chan});
    out.push_back({p + "time", d.time});
    d.trunk.collect(p + "trunk", out);
    d.out.collect(p + "out", out);
  };
  dec(dec_time_, "dec_time.");
  dec(dec_freq_, "dec_freq.");
  if (cfg_.domain_branch) domain_head_.collect("domain", out);
  return out;
}

nn::Tensor TokenizerModel::embed(const nn::Tensor& x, const nn::Tensor& chan, const nn::Tensor& time,
                                 std::size_t n_win) const {
  std::vector<std::size_t> ci, ti;
  ci.reserve(n_win * n_ * t_);
  ti.reserve(n_win * n_ * t_);
  for (std::size_t w = 0; w < n_win; ++w)
    for (std::size_t n = 0; n < n_; ++n)
      for (std::size_t t = 0; t < t_; ++t) {
        ci.push_back(n);
        ti.push_back(t);
      }
  return nn::add(nn::add(x, nn::gather_rows(chan, ci)), nn::gather_rows(time, ti));
}

nn::Tensor TokenizerModel::encode_features(const WindowSet& data, std::span<const std::size_t> ids) const {
  if (data.n_channels != n_ || data.steps != t_ || data.patch_len != cfg_.patch_len)
    throw ShapeError("dimension mismatch between windows and tokenizer");
  const std::size_t P = cfg_.patch_len;
  const std::size_t per = n_ * t_;
  std::vector<double> x(ids.size() * per * P);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const double* src = data.patch(ids[i], 0, 0);
    std::copy(src, src + per * P, x.begin() + static_cast<std::ptrdiff_t>(i * per * P));
  }
  auto h = nn::Tensor::constant({ids.size() * per, P, 1}, std::move(x));
  h = nn::gelu(conv1_(h));
  h = nn::gelu(conv2_(h));
  h = nn::gelu(conv3_(h));
  h = nn::reshape(h, {h.dim(0), h.dim(1) * h.dim(2)});
  h = embed(enc_in_(h), enc_chan_, enc_time_, ids.size());
  h = enc_(h, ids.size(), per, nn::AttentionMask::full(per));
  return enc_out_(h);
}

std::vector<vq::MultiScaleTokens> TokenizerModel::quantize(std::span<const double> f, std::size_t n_win,
                                                           std::vector<vq::EncodeTrace>* traces) const {
  const std::size_t C = cfg_.code_dim, per = n_ * t_ * C;
  if (f.size() != n_win * per) throw ShapeError("dimension mismatch: features do not match window count");
  for (double v : f)
    if (!std::isfinite(v)) throw Error("non-finite encoder features (diverged or non-finite input)");
  std::vector<vq::MultiScaleTokens> out;
  out.reserve(n_win);
  if (traces) traces->assign(n_win, {});
  for (std::size_t w = 0; w < n_win; ++w) {
    bth::FeatureMap fm(n_, t_, C);
    std::copy(f.begin() + static_cast<std::ptrdiff_t>(w * per), f.begin() + static_cast<std::ptrdiff_t>((w + 1) * per),
              fm.values.begin());
    out.push_back(vq::encode_multiscale(fm, h_, subset_, cb_, phi_, traces ? &(*traces)[w] : nullptr));
  }
  return out;
}

nn::Tensor TokenizerModel::quantized_features(const std::vector<vq::MultiScaleTokens>& tokens) const {
  const std::size_t C = cfg_.code_dim, n_win = tokens.size();
  nn::Tensor sum;
  for (std::size_t k = 0; k < subset_.size(); ++k) {
    const std::size_t s = subset_[k];
    const std::size_t G = h_.groups(s);
    std::vector<double> z;
    z.reserve(n_win * G * t_ * C);
    for (const auto& R : tokens) {
      const auto fm = vq::lookup(cb_, R.maps.at(k));
      z.insert(z.end(), fm.values.begin(), fm.values.end());
    }
    auto zt = nn::Tensor::constant({n_win * G, t_, C}, std::move(z));
    const auto& conv = phi_.convs[k];
    auto refined = nn::reshape(conv(zt), {n_win * G * t_, C});
    nn::RowMix mix;
    for (std::size_t w = 0; w < n_win; ++w)
      for (std::size_t n = 0; n < n_; ++n)
        for (std::size_t t = 0; t < t_; ++t) {
          mix.add((w * G + h_.group_of(s, n)) * t_ + t, 1.0);
          mix.close_row();
        }
    auto part = nn::mix_rows(refined, mix);
    sum = sum.defined() ? nn::add(sum, part) : part;
  }
  return sum;
}

nn::Tensor TokenizerModel::decode_time(const nn::Tensor& f_hat, std::size_t n_win) const {
  auto h = embed(dec_time_.in(f_hat), dec_time_.chan, dec_time_.time, n_win);
  h = dec_time_.trunk(h, n_win, n_ * t_, nn::AttentionMask::full(n_ * t_));
  return dec_time_.out(h);
}

nn::Tensor TokenizerModel::decode_freq(const nn::Tensor& f_hat, std::size_t n_win) const {
  auto h = embed(dec_freq_.in(f_hat), dec_freq_.chan, dec_freq_.time, n_win);
  h = dec_freq_.trunk(h, n_win, n_ * t_, nn::AttentionMask::full(n_ * t_));
  return dec_freq_.out(h);
}

nn::Tensor TokenizerModel::domain_logits(const nn::Tensor& rows) const { return domain_head_(rows); }

nn::Tensor TokenizerModel::text_features(std::span<const std::size_t> chars) const {
  return nn::gather_rows(text_table_, chars);
}

vq::MultiScaleTokens TokenizerModel::tokenize(const WindowSet& data, std::size_t w) const {
  const std::size_t id[1] = {w};
  auto f = encode_features(data, id);
  return std::move(quantize(f.value(), 1).front());
}

std::vector<double> TokenizerModel::reconstruct(const WindowSet& data, std::size_t w) const {
  const std::size_t id[1] = {w};
  auto f = encode_features(data, id);
  auto q = quantized_features(quantize(f.value(), 1));
  const auto rec = decode_time(nn::detach(q), 1);
  return {rec.value().begin(), rec.value().end()};
}

// ---- persistence ----------------------------------------------------------

void TokenizerModel::save(const std::string& dir) const {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir + "/tokenizer.json");
    if (!out) throw Error("cannot write " + dir + "/tokenizer.json");
    out << to_json_value(cfg_).dump(2) << "\n";
  }
  // Every tensor, frozen or not, plus the codebook rows in float64.
  auto full = cfg_;
  full.freeze_phi = false;
  full.domain_branch = true;
  TokenizerModel view = *this;
  view.cfg_ = full;
  auto params = view.parameters();
  params.push_back({"codebook.rows", nn::Tensor::constant({cb_.V, cb_.C}, cb_.vectors)});
  nn::save_checkpoint(dir + "/tokenizer.ckpt", params);
  vq::write_codebook(dir + "/codebook.thcb", cb_, phi_);
}

TokenizerModel TokenizerModel::load(const std::string& dir) {
  std::ifstream in(dir + "/tokenizer.json");
  if (!in) throw Error("missing upstream artifact: " + dir + "/tokenizer.json");
  Json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed tokenizer config: " + std::string(e.what()));
  }
  TokenizerConfig cfg;
  from_json_into_struct(j, cfg);
  TokenizerModel m(cfg);
  auto full = cfg;
  full.freeze_phi = false;
  full.domain_branch = true;
  TokenizerModel view = m;
  view.cfg_ = full;
  auto params = view.parameters();
  auto rows = nn::Tensor::constant({m.cb_.V, m.cb_.C}, std::vector<double>(m.cb_.V * m.cb_.C, 0.0));
  params.push_back({"codebook.rows", rows});
  nn::load_checkpoint(dir + "/tokenizer.ckpt", params);
  auto v = rows.value();
  m.cb_ = vq::Codebook(m.cb_.V, m.cb_.C, std::vector<double>(v.begin(), v.end()));
  return m;
}

}  // namespace thdbar::tokenizer
