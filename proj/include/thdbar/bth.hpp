// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "thdbar/signalio.hpp"

namespace thdbar::bth {

using Group = std::vector<std::size_t>;
using Partition = std::vector<Group>;

/// Nested channel partitions from the whole brain (scale 0) down to single
/// channels (scale S-1). Scale indices are zero-based in code; scheme files
/// and configs use the 1-based S1..SS names.
///
/// Invariants checked on construction:
///   - every channel appears in exactly one group at every scale;
///   - scale 0 is one group holding every channel;
///   - each finer partition refines the coarser one;
///   - the finest groups are singletons;
///   - groups are sorted by smallest member, members ascending.
class Hierarchy {
 public:
  Hierarchy() = default;
  Hierarchy(std::string montage_id, std::size_t n_channels, std::vector<Partition> partitions);

  const std::string& montage_id() const { return montage_id_; }
  std::size_t n_channels() const { return n_channels_; }
  std::size_t scales() const { return partitions_.size(); }
  std::size_t finest() const { return partitions_.size() - 1; }
  std::size_t groups(std::size_t scale) const { return partitions_.at(scale).size(); }
  std::vector<std::size_t> group_counts() const;
  const Group& group(std::size_t scale, std::size_t g) const { return partitions_.at(scale).at(g); }
  const Partition& partition(std::size_t scale) const { return partitions_.at(scale); }

  std::size_t group_of(std::size_t scale, std::size_t channel) const { return owner_.at(scale).at(channel); }
  // Group at `coarse` containing group `g` of scale `fine` (coarse <= fine).
  std::size_t ancestor(std::size_t fine, std::size_t g, std::size_t coarse) const;

 private:
  void validate() const;

  std::string montage_id_;
  std::size_t n_channels_ = 0;
  std::vector<Partition> partitions_;
  std::vector<std::vector<std::size_t>> owner_;
};

// Parses `S<scale>:<group_index>: ch1,ch2,...` lines (optional
// `montage: <id>` line, `#` comments) against a montage. Groups are put in
// canonical order after parsing.
Hierarchy parse_scheme(const std::string& text, const signalio::MontageSpec& montage);

// `scheme` is a built-in name ("seed62-5", "test8-4", "tri12-4", "tiny2-2")
// or a path to a scheme file.
Hierarchy build_hierarchy(const signalio::MontageSpec& montage, const std::string& scheme);
// Built-in scheme with its own montage.
Hierarchy builtin_hierarchy(const std::string& scheme);
// Built-in name, or a scheme file whose `montage:` line names a built-in
// montage.
Hierarchy load_hierarchy(const std::string& scheme);
std::string builtin_scheme_text(const std::string& scheme);
std::string builtin_scheme_montage(const std::string& scheme);

/// Ordered subset of scales used by one run (zero-based, strictly
/// increasing, non-empty).
struct ScaleSubset {
  std::vector<std::size_t> scales;

  static ScaleSubset all(const Hierarchy& h);
  static ScaleSubset finest_only(const Hierarchy& h);
  // From 1-based scale numbers as written in configs ("1,2,4").
  static ScaleSubset from_one_based(const std::vector<int>& one_based);
  std::vector<int> one_based() const;
  std::size_t size() const { return scales.size(); }
  std::size_t operator[](std::size_t i) const { return scales[i]; }
  void validate(const Hierarchy& h) const;
  std::size_t total_groups(const Hierarchy& h) const;
};

// Feature map laid out [groups x steps x dim].
struct FeatureMap {
  std::size_t groups = 0, steps = 0, dim = 0;
  std::vector<double> values;

  FeatureMap() = default;
  FeatureMap(std::size_t g, std::size_t t, std::size_t c) : groups(g), steps(t), dim(c), values(g * t * c, 0.0) {}
  double& at(std::size_t g, std::size_t t, std::size_t c) { return values[(g * steps + t) * dim + c]; }
  double at(std::size_t g, std::size_t t, std::size_t c) const { return values[(g * steps + t) * dim + c]; }
  const double* row(std::size_t g, std::size_t t) const { return values.data() + (g * steps + t) * dim; }
  double* row(std::size_t g, std::size_t t) { return values.data() + (g * steps + t) * dim; }
};

// Each coarse group takes the arithmetic mean of its member groups, per
// (t, c). Computed as first + mean of offsets so identical members give
// their value back bit-exactly.
FeatureMap downscale(const FeatureMap& x, const Hierarchy& h, std::size_t from_scale, std::size_t to_scale);
// Each fine group copies its ancestor's value.
FeatureMap upscale(const FeatureMap& z, const Hierarchy& h, std::size_t from_scale, std::size_t to_scale);

}  // namespace thdbar::bth
