// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <optional>

#include "thdbar/dsp.hpp"
#include "thdbar/error.hpp"

namespace thdbar::dsp {

double quantile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw Error("quantile of an empty sample");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

RobustStats robust_stats(std::span<const double> x) {
  std::vector<double> s(x.begin(), x.end());
  std::sort(s.begin(), s.end());
  return {quantile_sorted(s, 0.5), quantile_sorted(s, 0.75) - quantile_sorted(s, 0.25)};
}

RobustStats iqr_scale(std::vector<double>& x) {
  const auto st = robust_stats(x);
  if (st.iqr == 0.0) {
    for (auto& v : x) v -= st.median;
  } else {
    for (auto& v : x) v = (v - st.median) / st.iqr;
  }
  return st;
}

void PreprocessConfig::validate() const {
  if (!(target_rate > 0.0)) throw ConfigError("target_rate must be positive");
  if (!(band_lo_hz > 0.0 && band_lo_hz < band_hi_hz)) throw ConfigError("band edges must satisfy 0 < lo < hi");
  if (line_hz != 50.0 && line_hz != 60.0) throw ConfigError("line_hz must be 50 or 60");
  if (band_order < 1) throw ConfigError("band_order must be >= 1");
  if (!(notch_q > 0.0)) throw ConfigError("notch_q must be positive");
}

std::vector<std::vector<double>> preprocess_channels(const signalio::EegSegment& seg, const PreprocessConfig& cfg) {
  cfg.validate();
  seg.validate();
  const double rate = seg.rate;
  const double nyq = rate / 2.0;
  std::optional<FilterSpec> notch;
  if (cfg.line_hz < nyq) notch = design_filter(FilterKind::Notch, {cfg.line_hz}, rate, 2, cfg.notch_q);
  if (cfg.band_lo_hz >= nyq) throw ConfigError("band-pass low edge >= Nyquist of the input rate");
  const FilterSpec band = cfg.band_hi_hz < 0.95 * nyq
                              ? design_filter(FilterKind::Bandpass, {cfg.band_lo_hz, cfg.band_hi_hz}, rate, cfg.band_order)
                              : design_filter(FilterKind::Highpass, {cfg.band_lo_hz}, rate, cfg.band_order);
  const auto ratio = resample_ratio(rate, cfg.target_rate);

  std::vector<std::vector<double>> out(seg.n_channels);
  for (std::size_t ch = 0; ch < seg.n_channels; ++ch) {
    auto x = seg.channel(ch);
    // Every stage maps a constant to zero (the band-pass removes DC), so a
    // flat channel is emitted as exact zeros instead of rounding residue.
    if (std::all_of(x.begin(), x.end(), [&](double v) { return v == x.front(); })) {
      const auto n_in = static_cast<long>(x.size());
      out[ch].assign(static_cast<std::size_t>((n_in * ratio.up + ratio.down - 1) / ratio.down), 0.0);
      continue;
    }
    if (notch) x = filtfilt(*notch, x);
    x = filtfilt(band, x);
    x = resample_poly(x, ratio.up, ratio.down);
    iqr_scale(x);
    out[ch] = std::move(x);
  }
  return out;
}

signalio::EegSegment preprocess(const signalio::EegSegment& seg, const PreprocessConfig& cfg) {
  auto chans = preprocess_channels(seg, cfg);
  signalio::EegSegment out;
  out.montage_id = seg.montage_id;
  out.rate = static_cast<float>(cfg.target_rate);
  out.label = seg.label;
  out.n_channels = chans.size();
  out.n_samples = chans.empty() ? 0 : chans[0].size();
  out.data.reserve(out.n_channels * out.n_samples);
  for (const auto& c : chans)
    for (double v : c) out.data.push_back(static_cast<float>(v));
  return out;
}

signalio::EegSegment preprocess(const signalio::EegSegment& seg, double line_hz) {
  PreprocessConfig cfg;
  cfg.line_hz = line_hz;
  return preprocess(seg, cfg);
}

Patches patchify(const signalio::EegSegment& seg, std::size_t window_len, std::size_t patch_len) {
  if (patch_len == 0) throw ConfigError("patch length P must be positive");
  if (patch_len > window_len) throw ConfigError("patch length P must not exceed window length W");
  if (seg.n_samples == 0) throw Error("cannot patchify an empty segment");
  if (seg.data.size() != seg.n_channels * seg.n_samples) throw ShapeError("dimension mismatch in segment");
  Patches out;
  auto& g = out.grid;
  g.n_channels = seg.n_channels;
  g.n_patches = window_len / patch_len;
  g.patch_len = patch_len;
  g.window_len = window_len;
  g.n_windows = (seg.n_samples + window_len - 1) / window_len;
  g.n_samples = seg.n_samples;
  const std::size_t covered = g.n_patches * patch_len;
  const std::size_t tail = window_len - covered;
  out.values.assign(g.n_windows * g.n_channels * covered, 0.0);
  out.tails.assign(g.n_windows * g.n_channels * tail, 0.0);
  g.pad_mask.assign(g.n_windows * g.n_channels * g.n_patches, 0);
  for (std::size_t w = 0; w < g.n_windows; ++w) {
    const std::size_t start = w * window_len;
    const std::size_t real = std::min(window_len, seg.n_samples - start);
    for (std::size_t ch = 0; ch < g.n_channels; ++ch) {
      double* dst = out.values.data() + (w * g.n_channels + ch) * covered;
      double* tail_dst = out.tails.data() + (w * g.n_channels + ch) * tail;
      for (std::size_t i = 0; i < real; ++i) {
        const double v = seg.at(ch, start + i);
        if (i < covered)
          dst[i] = v;
        else
          tail_dst[i - covered] = v;
      }
      for (std::size_t t = 0; t < g.n_patches; ++t)
        g.pad_mask[(w * g.n_channels + ch) * g.n_patches + t] = (t + 1) * patch_len > real ? 1 : 0;
    }
  }
  return out;
}

std::vector<double> unpatchify(const Patches& p) {
  const auto& g = p.grid;
  const std::size_t covered = g.n_patches * g.patch_len;
  const std::size_t tail = g.window_len - covered;
  std::vector<double> out(g.n_channels * g.n_samples);
  for (std::size_t ch = 0; ch < g.n_channels; ++ch)
    for (std::size_t i = 0; i < g.n_samples; ++i) {
      const std::size_t w = i / g.window_len, k = i % g.window_len;
      out[ch * g.n_samples + i] = k < covered ? p.values[(w * g.n_channels + ch) * covered + k]
                                              : p.tails[(w * g.n_channels + ch) * tail + (k - covered)];
    }
  return out;
}

}  // namespace thdbar::dsp
