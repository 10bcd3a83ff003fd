// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <complex>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "thdbar/signalio.hpp"

namespace thdbar::dsp {

enum class FilterKind { Bandpass, Highpass, Notch };

// Second-order section, a0 normalised to 1.
struct Section {
  double b0 = 1.0, b1 = 0.0, b2 = 0.0, a1 = 0.0, a2 = 0.0;
};

struct FilterSpec {
  FilterKind kind = FilterKind::Bandpass;
  std::vector<double> edges;  // Hz
  double rate = 0.0;
  int order = 0;
  std::vector<Section> sections;

  // Every section's poles strictly inside the unit circle.
  bool stable() const;
  std::complex<double> response(double hz) const;
  double gain_db(double hz) const;
  // Edge extension used by filtfilt (three times the effective tap count).
  std::size_t padlen() const;
};

// Bandpass: Butterworth of prototype order `order` (2*order poles), edges
// {lo, hi}. Highpass: Butterworth, edges {lo}. Notch: second-order notch at
// edges {f0} with quality factor `q`.
FilterSpec design_filter(FilterKind kind, std::vector<double> edges, double rate, int order = 4, double q = 30.0);

// Single causal pass from a zero state.
std::vector<double> sosfilt(const FilterSpec& f, std::span<const double> x);
// Zero-phase forward-backward pass with odd extension and steady-state
// initial conditions. Throws if x is not longer than padlen().
std::vector<double> filtfilt(const FilterSpec& f, std::span<const double> x);

struct Ratio {
  long up = 1, down = 1;
};
// Reduced up/down factors taking `from` Hz to `to` Hz; rates are resolved to
// 1 mHz.
Ratio resample_ratio(double from, double to);
// Polyphase rational resampling with a Kaiser-windowed (beta) sinc low-pass
// of half length 10*max(up, down). Output length ceil(n*up/down).
std::vector<double> resample_poly(std::span<const double> x, long up, long down, double beta = 5.0);

// Linear-interpolated quantile of a sorted sample, q in [0, 1].
double quantile_sorted(std::span<const double> sorted, double q);
struct RobustStats {
  double median = 0.0;
  double iqr = 0.0;
};
RobustStats robust_stats(std::span<const double> x);
// x <- (x - median) / IQR, or x - median when IQR == 0. Returns the stats
// that were applied.
RobustStats iqr_scale(std::vector<double>& x);

struct PreprocessConfig {
  double target_rate = 200.0;
  double band_lo_hz = 0.1;
  double band_hi_hz = 75.0;
  int band_order = 4;
  double line_hz = 50.0;
  double notch_q = 30.0;

  void validate() const;
};

// notch -> band-pass -> resample -> IQR scale, per channel, computed in
// double precision. When band_hi_hz is at or above 0.95 of the input
// Nyquist the low-pass edge is dropped (high-pass only); when line_hz is at
// or above the input Nyquist the notch is skipped.
std::vector<std::vector<double>> preprocess_channels(const signalio::EegSegment& seg, const PreprocessConfig& cfg);
signalio::EegSegment preprocess(const signalio::EegSegment& seg, const PreprocessConfig& cfg);
signalio::EegSegment preprocess(const signalio::EegSegment& seg, double line_hz);

struct PatchGrid {
  std::size_t n_channels = 0;
  std::size_t n_patches = 0;  // T per window
  std::size_t patch_len = 0;  // P
  std::size_t window_len = 0;  // W
  std::size_t n_windows = 0;
  std::size_t n_samples = 0;  // unpadded input length
  // [window][channel][patch], 1 where the patch holds any zero padding.
  std::vector<std::uint8_t> pad_mask;

  bool padded(std::size_t w, std::size_t ch, std::size_t t) const {
    return pad_mask[(w * n_channels + ch) * n_patches + t] != 0;
  }
};

struct Patches {
  PatchGrid grid;
  // [window][channel][patch][sample]
  std::vector<double> values;
  // Samples W - P*T at the end of each window that no patch covers,
  // [window][channel][W - P*T], kept so the cut is invertible.
  std::vector<double> tails;

  const double* patch(std::size_t w, std::size_t ch, std::size_t t) const {
    return values.data() + ((w * grid.n_channels + ch) * grid.n_patches + t) * grid.patch_len;
  }
};

Patches patchify(const signalio::EegSegment& seg, std::size_t window_len = 1024, std::size_t patch_len = 200);
// Concatenates windows back and drops the padding: [channel][n_samples].
std::vector<double> unpatchify(const Patches& p);

}  // namespace thdbar::dsp
