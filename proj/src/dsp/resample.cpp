// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <numeric>
#include <numbers>

#include "thdbar/dsp.hpp"
#include "thdbar/error.hpp"

namespace thdbar::dsp {
namespace {

double sinc(double x) {
  if (x == 0.0) return 1.0;
  const double px = std::numbers::pi * x;
  return std::sin(px) / px;
}

// Kaiser-windowed low-pass with cutoff `fc` (fraction of Nyquist), unit DC
// gain.
std::vector<double> kaiser_lowpass(std::size_t taps, double fc, double beta) {
  std::vector<double> h(taps);
  const double alpha = 0.5 * static_cast<double>(taps - 1);
  const double i0b = std::cyl_bessel_i(0.0, beta);
  double sum = 0.0;
  for (std::size_t n = 0; n < taps; ++n) {
    const double m = static_cast<double>(n) - alpha;
    const double r = taps > 1 ? 2.0 * static_cast<double>(n) / static_cast<double>(taps - 1) - 1.0 : 0.0;
    const double w = std::cyl_bessel_i(0.0, beta * std::sqrt(std::max(0.0, 1.0 - r * r))) / i0b;
    h[n] = fc * sinc(fc * m) * w;
    sum += h[n];
  }
  for (auto& v : h) v /= sum;
  return h;
}

long upfirdn_length(long len_h, long len_x, long up, long down) { return ((len_x - 1) * up + len_h - 1) / down + 1; }

}  // namespace

Ratio resample_ratio(double from, double to) {
  if (!(from > 0.0) || !(to > 0.0)) throw ConfigError("resample rates must be positive");
  const long a = std::lround(to * 1000.0), b = std::lround(from * 1000.0);
  const long g = std::gcd(a, b);
  return {a / g, b / g};
}

std::vector<double> resample_poly(std::span<const double> x, long up, long down, double beta) {
  if (up < 1 || down < 1) throw ConfigError("resample factors must be >= 1");
  const long g = std::gcd(up, down);
  up /= g;
  down /= g;
  if (up == 1 && down == 1) return {x.begin(), x.end()};
  if (x.empty()) return {};
  const long max_rate = std::max(up, down);
  const long half_len = 10 * max_rate;
  auto h = kaiser_lowpass(static_cast<std::size_t>(2 * half_len + 1), 1.0 / static_cast<double>(max_rate), beta);
  for (auto& v : h) v *= static_cast<double>(up);

  const long n_in = static_cast<long>(x.size());
  const long n_out = (n_in * up + down - 1) / down;
  const long pre_pad = down - half_len % down;
  const long pre_remove = (half_len + pre_pad) / down;
  long post_pad = 0;
  while (upfirdn_length(static_cast<long>(h.size()) + pre_pad + post_pad, n_in, up, down) < n_out + pre_remove)
    ++post_pad;

  // Filter with pre_pad leading zeros: hp[j] = h[j - pre_pad].
  const long len_hp = static_cast<long>(h.size()) + pre_pad + post_pad;
  std::vector<double> y(static_cast<std::size_t>(n_out), 0.0);
  for (long k = 0; k < n_out; ++k) {
    const long pos = (k + pre_remove) * down;  // index into the upsampled, filtered stream
    // y = sum_i x[i] hp[pos - i*up] with 0 <= pos - i*up < len_hp
    long i_hi = std::min(n_in - 1, pos / up);
    long i_lo = pos - len_hp + 1 <= 0 ? 0 : (pos - len_hp + 1 + up - 1) / up;
    double acc = 0.0;
    for (long i = i_lo; i <= i_hi; ++i) {
      const long j = pos - i * up - pre_pad;
      if (j >= 0 && j < static_cast<long>(h.size())) acc += x[static_cast<std::size_t>(i)] * h[static_cast<std::size_t>(j)];
    }
    y[static_cast<std::size_t>(k)] = acc;
  }
  return y;
}

}  // namespace thdbar::dsp
