// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "../builtin_data.hpp"
#include "thdbar/bth.hpp"
#include "thdbar/error.hpp"

namespace thdbar::bth {

Hierarchy::Hierarchy(std::string montage_id, std::size_t n_channels, std::vector<Partition> partitions)
    : montage_id_(std::move(montage_id)), n_channels_(n_channels), partitions_(std::move(partitions)) {
  validate();
  owner_.assign(partitions_.size(), std::vector<std::size_t>(n_channels_, 0));
  for (std::size_t s = 0; s < partitions_.size(); ++s)
    for (std::size_t g = 0; g < partitions_[s].size(); ++g)
      for (auto ch : partitions_[s][g]) owner_[s][ch] = g;
}

void Hierarchy::validate() const {
  if (partitions_.empty()) throw Error("empty hierarchy: no scales");
  if (n_channels_ == 0) throw Error("empty hierarchy: no channels");
  std::vector<std::vector<std::size_t>> owner(partitions_.size(), std::vector<std::size_t>(n_channels_));
  for (std::size_t s = 0; s < partitions_.size(); ++s) {
    const std::string where = " at S" + std::to_string(s + 1);
    std::vector<int> seen(n_channels_, 0);
    for (std::size_t g = 0; g < partitions_[s].size(); ++g) {
      const auto& grp = partitions_[s][g];
      if (grp.empty()) throw Error("empty group" + where);
      for (std::size_t i = 0; i < grp.size(); ++i) {
        if (grp[i] >= n_channels_) throw Error("unknown channel index " + std::to_string(grp[i]) + where);
        if (i > 0 && grp[i] <= grp[i - 1]) throw Error("non-canonical group order" + where);
        if (seen[grp[i]]++) throw Error("duplicated channel " + std::to_string(grp[i]) + where);
        owner[s][grp[i]] = g;
      }
      if (g > 0 && grp.front() <= partitions_[s][g - 1].front()) throw Error("non-canonical group order" + where);
    }
    for (std::size_t ch = 0; ch < n_channels_; ++ch)
      if (!seen[ch]) throw Error("missing channel " + std::to_string(ch) + where);
  }
  if (partitions_.front().size() != 1) throw Error("scale S1 must be a single whole-brain group");
  if (partitions_.back().size() != n_channels_) throw Error("finest scale must consist of singleton groups");
  for (std::size_t s = 1; s < partitions_.size(); ++s) {
    for (const auto& grp : partitions_[s]) {
      const auto parent = owner[s - 1][grp.front()];
      for (auto ch : grp)
        if (owner[s - 1][ch] != parent)
          throw Error("non-nested partitions: a group at S" + std::to_string(s + 1) + " spans two groups at S" +
                      std::to_string(s));
    }
  }
}

std::vector<std::size_t> Hierarchy::group_counts() const {
  std::vector<std::size_t> out;
  for (const auto& p : partitions_) out.push_back(p.size());
  return out;
}

std::size_t Hierarchy::ancestor(std::size_t fine, std::size_t g, std::size_t coarse) const {
  if (coarse > fine) throw Error("scale order violated: ancestor must be coarser");
  return owner_.at(coarse).at(group(fine, g).front());
}

namespace {

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

Hierarchy parse_scheme(const std::string& text, const signalio::MontageSpec& montage) {
  std::istringstream in(text);
  std::string line;
  std::vector<std::vector<std::pair<std::size_t, Group>>> scales;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    if (line.rfind("montage:", 0) == 0) {
      const auto id = trim(line.substr(8));
      if (id != montage.montage_id)
        throw Error("scheme is for montage " + id + ", not " + montage.montage_id);
      continue;
    }
    const auto c1 = line.find(':');
    const auto c2 = c1 == std::string::npos ? c1 : line.find(':', c1 + 1);
    if (line[0] != 'S' || c2 == std::string::npos)
      throw FormatError("malformed scheme line " + std::to_string(line_no) + ": " + line);
    std::size_t scale = 0, gidx = 0;
    try {
      scale = std::stoul(line.substr(1, c1 - 1));
      gidx = std::stoul(line.substr(c1 + 1, c2 - c1 - 1));
    } catch (const std::exception&) {
      throw FormatError("malformed scheme line " + std::to_string(line_no) + ": " + line);
    }
    if (scale == 0) throw FormatError("scale numbers start at S1 (line " + std::to_string(line_no) + ")");
    Group grp;
    std::istringstream names(line.substr(c2 + 1));
    std::string name;
    while (std::getline(names, name, ',')) {
      name = trim(name);
      if (!name.empty()) grp.push_back(montage.index_of(name));
    }
    if (scales.size() < scale) scales.resize(scale);
    scales[scale - 1].push_back({gidx, std::move(grp)});
  }
  std::vector<Partition> parts;
  for (std::size_t s = 0; s < scales.size(); ++s) {
    auto& entries = scales[s];
    if (entries.empty()) throw Error("missing scale S" + std::to_string(s + 1) + " in scheme");
    std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    Partition p;
    for (auto& [idx, grp] : entries) {
      std::sort(grp.begin(), grp.end());
      p.push_back(std::move(grp));
    }
    std::sort(p.begin(), p.end(), [](const Group& a, const Group& b) { return a.front() < b.front(); });
    parts.push_back(std::move(p));
  }
  return Hierarchy(montage.montage_id, montage.size(), std::move(parts));
}

std::string builtin_scheme_text(const std::string& scheme) {
  if (auto text = detail::builtin_text(scheme)) return *text;
  throw ConfigError("unknown hierarchy scheme: " + scheme);
}

std::string builtin_scheme_montage(const std::string& scheme) {
  std::istringstream in(builtin_scheme_text(scheme));
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("montage:", 0) == 0) return trim(line.substr(8));
  }
  throw ConfigError("built-in scheme " + scheme + " names no montage");
}

Hierarchy build_hierarchy(const signalio::MontageSpec& montage, const std::string& scheme) {
  if (detail::builtin_text(scheme)) return parse_scheme(builtin_scheme_text(scheme), montage);
  std::ifstream in(scheme);
  if (!in) throw ConfigError("unknown hierarchy scheme: " + scheme);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_scheme(ss.str(), montage);
}

Hierarchy builtin_hierarchy(const std::string& scheme) {
  return build_hierarchy(signalio::montage(builtin_scheme_montage(scheme)), scheme);
}

Hierarchy load_hierarchy(const std::string& scheme) {
  if (detail::builtin_text(scheme)) return builtin_hierarchy(scheme);
  std::ifstream in(scheme);
  if (!in) throw ConfigError("unknown hierarchy scheme: " + scheme);
  std::stringstream ss;
  ss << in.rdbuf();
  std::istringstream lines(ss.str());
  std::string line;
  while (std::getline(lines, line)) {
    if (line.rfind("montage:", 0) == 0) return parse_scheme(ss.str(), signalio::montage(trim(line.substr(8))));
  }
  throw ConfigError("scheme file " + scheme + " names no montage");
}

ScaleSubset ScaleSubset::all(const Hierarchy& h) {
  ScaleSubset s;
  for (std::size_t i = 0; i < h.scales(); ++i) s.scales.push_back(i);
  return s;
}

ScaleSubset ScaleSubset::finest_only(const Hierarchy& h) { return ScaleSubset{{h.finest()}}; }

ScaleSubset ScaleSubset::from_one_based(const std::vector<int>& one_based) {
  ScaleSubset s;
  for (int v : one_based) {
    if (v < 1) throw ConfigError("scale numbers start at 1, got " + std::to_string(v));
    s.scales.push_back(static_cast<std::size_t>(v - 1));
  }
  return s;
}

std::vector<int> ScaleSubset::one_based() const {
  std::vector<int> out;
  for (auto s : scales) out.push_back(static_cast<int>(s) + 1);
  return out;
}

void ScaleSubset::validate(const Hierarchy& h) const {
  if (scales.empty()) throw ConfigError("scale subset must not be empty");
  for (std::size_t i = 0; i < scales.size(); ++i) {
    if (scales[i] >= h.scales())
      throw ConfigError("subset/hierarchy mismatch: scale S" + std::to_string(scales[i] + 1) + " not in hierarchy");
    if (i > 0 && scales[i] <= scales[i - 1]) throw ConfigError("scale subset must be strictly increasing");
  }
}

std::size_t ScaleSubset::total_groups(const Hierarchy& h) const {
  std::size_t n = 0;
  for (auto s : scales) n += h.groups(s);
  return n;
}

FeatureMap downscale(const FeatureMap& x, const Hierarchy& h, std::size_t from_scale, std::size_t to_scale) {
  if (to_scale > from_scale) throw Error("scale order violated: downscale target must be coarser");
  if (x.groups != h.groups(from_scale))
    throw ShapeError("shape mismatch: feature map has " + std::to_string(x.groups) + " groups, scale has " +
                     std::to_string(h.groups(from_scale)));
  if (to_scale == from_scale) return x;
  FeatureMap out(h.groups(to_scale), x.steps, x.dim);
  std::vector<std::vector<std::size_t>> members(out.groups);
  for (std::size_t g = 0; g < x.groups; ++g) members[h.ancestor(from_scale, g, to_scale)].push_back(g);
  for (std::size_t g = 0; g < out.groups; ++g) {
    const auto& m = members[g];
    const double inv = 1.0 / static_cast<double>(m.size());
    for (std::size_t t = 0; t < x.steps; ++t) {
      const double* first = x.row(m[0], t);
      double* dst = out.row(g, t);
      for (std::size_t c = 0; c < x.dim; ++c) {
        double off = 0.0;
        for (std::size_t k = 1; k < m.size(); ++k) off += x.row(m[k], t)[c] - first[c];
        dst[c] = first[c] + off * inv;
      }
    }
  }
  return out;
}

FeatureMap upscale(const FeatureMap& z, const Hierarchy& h, std::size_t from_scale, std::size_t to_scale) {
  if (to_scale < from_scale) throw Error("scale order violated: upscale target must be finer");
  if (z.groups != h.groups(from_scale))
    throw ShapeError("shape mismatch: feature map has " + std::to_string(z.groups) + " groups, scale has " +
                     std::to_string(h.groups(from_scale)));
  if (to_scale == from_scale) return z;
  FeatureMap out(h.groups(to_scale), z.steps, z.dim);
  for (std::size_t g = 0; g < out.groups; ++g) {
    const auto a = h.ancestor(to_scale, g, from_scale);
    std::copy_n(z.values.data() + a * z.steps * z.dim, z.steps * z.dim, out.values.data() + g * z.steps * z.dim);
  }
  return out;
}

}  // namespace thdbar::bth
