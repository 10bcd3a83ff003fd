// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>

#include "thdbar/dsp.hpp"
#include "thdbar/error.hpp"

namespace thdbar::dsp {
namespace {

using cd = std::complex<double>;

struct Zpk {
  std::vector<cd> z, p;
  double k = 1.0;
};

// Analog Butterworth prototype, cutoff 1 rad/s.
Zpk butter_prototype(int n) {
  Zpk out;
  for (int m = -n + 1; m < n; m += 2)
    out.p.push_back(-std::exp(cd(0.0, std::numbers::pi * m / (2.0 * n))));
  return out;
}

Zpk lp_to_bp(const Zpk& in, double wo, double bw) {
  Zpk out;
  for (const auto& p : in.p) {
    const cd pl = p * (bw / 2.0);
    const cd root = std::sqrt(pl * pl - wo * wo);
    out.p.push_back(pl + root);
    out.p.push_back(pl - root);
  }
  out.z.assign(in.p.size() - in.z.size(), cd(0.0));
  out.k = in.k * std::pow(bw, static_cast<double>(in.p.size() - in.z.size()));
  return out;
}

Zpk lp_to_hp(const Zpk& in, double wo) {
  Zpk out;
  cd prod_p(1.0);
  for (const auto& p : in.p) {
    out.p.push_back(wo / p);
    prod_p *= -p;
  }
  out.z.assign(in.p.size(), cd(0.0));
  out.k = in.k / prod_p.real();
  return out;
}

// Bilinear transform with the sample rate normalised to fs = 2.
Zpk bilinear(const Zpk& in) {
  constexpr double fs2 = 4.0;
  Zpk out;
  cd num(1.0), den(1.0);
  for (const auto& z : in.z) {
    out.z.push_back((fs2 + z) / (fs2 - z));
    num *= fs2 - z;
  }
  for (const auto& p : in.p) {
    out.p.push_back((fs2 + p) / (fs2 - p));
    den *= fs2 - p;
  }
  while (out.z.size() < out.p.size()) out.z.push_back(cd(-1.0));
  out.k = in.k * (num / den).real();
  return out;
}

// Pairs conjugate poles into sections. Poles nearest the unit circle pick
// their nearest remaining (real) zeros first; sections are then ordered with
// those poles last.
std::vector<Section> to_sections(const Zpk& d) {
  std::vector<std::pair<cd, cd>> pairs;
  std::vector<double> reals;
  for (const auto& p : d.p) {
    if (std::abs(p.imag()) <= 1e-12 * std::max(1.0, std::abs(p)))
      reals.push_back(p.real());
    else if (p.imag() > 0.0)
      pairs.push_back({p, std::conj(p)});
  }
  std::sort(reals.begin(), reals.end());
  for (std::size_t i = 0; i + 1 < reals.size(); i += 2) pairs.push_back({cd(reals[i]), cd(reals[i + 1])});
  const bool odd = reals.size() % 2 == 1;
  auto circle_gap = [](const cd& p) { return std::abs(1.0 - std::abs(p)); };
  std::stable_sort(pairs.begin(), pairs.end(),
                   [&](const auto& a, const auto& b) { return circle_gap(a.first) < circle_gap(b.first); });

  std::vector<double> zeros;
  for (const auto& z : d.z) zeros.push_back(z.real());
  auto take_nearest = [&](const cd& p) {
    if (zeros.empty()) return std::optional<double>{};
    auto it = std::min_element(zeros.begin(), zeros.end(),
                               [&](double a, double b) { return std::abs(p - a) < std::abs(p - b); });
    const double z = *it;
    zeros.erase(it);
    return std::optional<double>{z};
  };

  std::vector<Section> out;
  for (const auto& [p1, p2] : pairs) {
    Section s;
    const auto z1 = take_nearest(p1), z2 = take_nearest(p2);
    const double a = z1.value_or(0.0), b = z2.value_or(0.0);
    s.b1 = -((z1 ? a : 0.0) + (z2 ? b : 0.0));
    s.b2 = (z1 && z2) ? a * b : 0.0;
    s.a1 = -(p1 + p2).real();
    s.a2 = (p1 * p2).real();
    out.push_back(s);
  }
  if (odd) {
    Section s;
    const auto z = take_nearest(cd(reals.back()));
    s.b1 = z ? -*z : 0.0;
    s.a1 = -reals.back();
    out.push_back(s);
  }
  std::reverse(out.begin(), out.end());
  out.front().b0 *= d.k;
  out.front().b1 *= d.k;
  out.front().b2 *= d.k;
  return out;
}

bool section_stable(const Section& s) { return std::abs(s.a2) < 1.0 && std::abs(s.a1) < 1.0 + s.a2; }

// Steady-state transposed direct-form II state for a unit step.
std::pair<double, double> section_zi(const Section& s) {
  // (I - A^T) zi = b[1:] - a[1:] b0 with A the companion matrix of a.
  const double r1 = s.b1 - s.a1 * s.b0, r2 = s.b2 - s.a2 * s.b0;
  const double det = (1.0 + s.a1) + s.a2;
  const double z0 = (r1 + r2) / det;
  const double z1 = r2 - s.a2 * z0;
  return {z0, z1};
}

void run_sections(const std::vector<Section>& secs, std::vector<double>& x, std::vector<std::pair<double, double>> state) {
  for (std::size_t k = 0; k < secs.size(); ++k) {
    const auto& s = secs[k];
    double z0 = state[k].first, z1 = state[k].second;
    for (auto& v : x) {
      const double in = v;
      const double y = s.b0 * in + z0;
      z0 = s.b1 * in - s.a1 * y + z1;
      z1 = s.b2 * in - s.a2 * y;
      v = y;
    }
  }
}

}  // namespace

bool FilterSpec::stable() const {
  return !sections.empty() && std::all_of(sections.begin(), sections.end(), section_stable);
}

std::complex<double> FilterSpec::response(double hz) const {
  const cd zinv = std::exp(cd(0.0, -2.0 * std::numbers::pi * hz / rate));
  cd h(1.0);
  for (const auto& s : sections)
    h *= (s.b0 + zinv * (s.b1 + zinv * s.b2)) / (1.0 + zinv * (s.a1 + zinv * s.a2));
  return h;
}

double FilterSpec::gain_db(double hz) const { return 20.0 * std::log10(std::abs(response(hz))); }

std::size_t FilterSpec::padlen() const {
  std::size_t taps = 2 * sections.size() + 1;
  std::size_t zero_b2 = 0, zero_a2 = 0;
  for (const auto& s : sections) {
    zero_b2 += s.b2 == 0.0;
    zero_a2 += s.a2 == 0.0;
  }
  return 3 * (taps - std::min(zero_b2, zero_a2));
}

FilterSpec design_filter(FilterKind kind, std::vector<double> edges, double rate, int order, double q) {
  if (!(rate > 0.0)) throw ConfigError("filter rate must be positive");
  const double nyq = rate / 2.0;
  for (double e : edges) {
    if (!(e > 0.0)) throw ConfigError("filter edge must be positive");
    if (e >= nyq) throw ConfigError("edge >= Nyquist: " + std::to_string(e) + " Hz at rate " + std::to_string(rate));
  }
  FilterSpec f;
  f.kind = kind;
  f.edges = edges;
  f.rate = rate;
  f.order = kind == FilterKind::Notch ? 2 : order;
  switch (kind) {
    case FilterKind::Bandpass: {
      if (edges.size() != 2 || !(edges[0] < edges[1])) throw ConfigError("band-pass needs edges lo < hi");
      if (order < 1) throw ConfigError("filter order must be >= 1");
      const double wl = 4.0 * std::tan(std::numbers::pi * edges[0] / rate);
      const double wh = 4.0 * std::tan(std::numbers::pi * edges[1] / rate);
      f.sections = to_sections(bilinear(lp_to_bp(butter_prototype(order), std::sqrt(wl * wh), wh - wl)));
      break;
    }
    case FilterKind::Highpass: {
      if (edges.size() != 1) throw ConfigError("high-pass needs one edge");
      if (order < 1) throw ConfigError("filter order must be >= 1");
      const double wo = 4.0 * std::tan(std::numbers::pi * edges[0] / rate);
      f.sections = to_sections(bilinear(lp_to_hp(butter_prototype(order), wo)));
      break;
    }
    case FilterKind::Notch: {
      if (edges.size() != 1) throw ConfigError("notch needs one edge");
      if (!(q > 0.0)) throw ConfigError("notch quality factor must be positive");
      const double w0 = 2.0 * std::numbers::pi * edges[0] / rate;
      const double beta = std::tan(w0 / q / 2.0);
      const double gain = 1.0 / (1.0 + beta);
      Section s;
      s.b0 = gain;
      s.b1 = -2.0 * gain * std::cos(w0);
      s.b2 = gain;
      s.a1 = -2.0 * gain * std::cos(w0);
      s.a2 = 2.0 * gain - 1.0;
      f.sections = {s};
      break;
    }
  }
  for (const auto& s : f.sections)
    for (double c : {s.b0, s.b1, s.b2, s.a1, s.a2})
      if (!std::isfinite(c)) throw Error("unstable design: non-finite coefficient");
  if (!f.stable()) throw Error("unstable design: pole on or outside the unit circle");
  return f;
}

std::vector<double> sosfilt(const FilterSpec& f, std::span<const double> x) {
  std::vector<double> y(x.begin(), x.end());
  run_sections(f.sections, y, std::vector<std::pair<double, double>>(f.sections.size(), {0.0, 0.0}));
  return y;
}

std::vector<double> filtfilt(const FilterSpec& f, std::span<const double> x) {
  const std::size_t edge = f.padlen();
  if (x.size() <= edge)
    throw Error("segment shorter than filter warm-up length: " + std::to_string(x.size()) + " samples, need more than " +
                std::to_string(edge));
  const std::size_t n = x.size();
  std::vector<double> ext(n + 2 * edge);
  for (std::size_t i = 0; i < edge; ++i) ext[i] = 2.0 * x[0] - x[edge - i];
  std::copy(x.begin(), x.end(), ext.begin() + static_cast<std::ptrdiff_t>(edge));
  for (std::size_t i = 0; i < edge; ++i) ext[edge + n + i] = 2.0 * x[n - 1] - x[n - 2 - i];

  std::vector<std::pair<double, double>> zi;
  double scale = 1.0;
  for (const auto& s : f.sections) {
    auto [z0, z1] = section_zi(s);
    zi.push_back({z0 * scale, z1 * scale});
    scale *= (s.b0 + s.b1 + s.b2) / (1.0 + s.a1 + s.a2);
  }
  auto scaled = [&](double v) {
    auto out = zi;
    for (auto& [a, b] : out) {
      a *= v;
      b *= v;
    }
    return out;
  };
  run_sections(f.sections, ext, scaled(ext.front()));
  std::reverse(ext.begin(), ext.end());
  run_sections(f.sections, ext, scaled(ext.front()));
  std::reverse(ext.begin(), ext.end());
  return std::vector<double>(ext.begin() + static_cast<std::ptrdiff_t>(edge),
                             ext.begin() + static_cast<std::ptrdiff_t>(edge + n));
}

}  // namespace thdbar::dsp
