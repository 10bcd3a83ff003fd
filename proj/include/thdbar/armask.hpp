// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "thdbar/bth.hpp"
#include "thdbar/nn/ops.hpp"

namespace thdbar::armask {

struct Position {
  std::size_t t = 0;
  std::size_t k = 0;      // index into the selected scales, coarse to fine
  std::size_t scale = 0;  // hierarchy scale (zero-based)
  std::size_t g = 0;      // group within that scale
  bool operator==(const Position&) const = default;
};

/// Sequence order over (time, scale, group): time outermost, then the
/// selected scales coarse to fine, then groups in canonical order. A block
/// is the run of positions sharing one (t, k).
struct FlattenOrder {
  std::size_t steps = 0;
  std::vector<std::size_t> scales;        // selected hierarchy scales
  std::vector<std::size_t> group_counts;  // per selected scale
  std::vector<Position> positions;
  std::vector<std::size_t> block_begin;  // blocks()+1 offsets

  std::size_t length() const { return positions.size(); }
  std::size_t scales_per_step() const { return scales.size(); }
  std::size_t blocks() const { return block_begin.size() - 1; }
  std::size_t block_id(std::size_t t, std::size_t k) const { return t * scales.size() + k; }
  std::size_t block_of(std::size_t pos) const;
  // Inverse map; throws on out-of-range arguments.
  std::size_t position_of(std::size_t t, std::size_t k, std::size_t g) const;
};

FlattenOrder flatten(const bth::Hierarchy& h, const bth::ScaleSubset& subset, std::size_t steps);
// Same layout from bare group counts; scale indices are 0..n-1.
FlattenOrder flatten(const std::vector<std::size_t>& group_counts, std::size_t steps);

enum class MaskMode { ScaleWise, TimeWise, ScaleTimeWise };
std::string to_string(MaskMode m);
// "scale_wise", "time_wise", "scale_time_wise".
MaskMode parse_mask_mode(const std::string& s);

/// Permission matrix between blocks: allowed(b, b') means positions of
/// block b may attend to positions of block b'.
struct BlockMask {
  MaskMode mode = MaskMode::ScaleTimeWise;
  std::size_t blocks = 0;
  std::vector<std::uint8_t> allowed;

  bool operator()(std::size_t b, std::size_t b2) const { return allowed[b * blocks + b2] != 0; }
  // Position-level mask: i may read j iff the blocks of i and j are allowed.
  nn::AttentionMask expand(const FlattenOrder& order) const;
};

// Block (t, s) sees block (t', s') iff
//   scale_time_wise: t' < t, or t' == t and s' <= s
//   time_wise:       t' < t, or (t', s') == (t, s)
//   scale_wise:      t' == t and s' <= s
BlockMask build_mask(const FlattenOrder& order, MaskMode mode);

// Binary portable bitmap (PBM "P4"): header "P4\n<cols> <rows>\n", then
// rows of bits packed MSB first and padded to whole bytes; 1 = allowed.
std::string to_pbm(const nn::AttentionMask& mask);
nn::AttentionMask from_pbm(const std::string& bytes);
void write_pbm(const std::string& path, const nn::AttentionMask& mask);
nn::AttentionMask read_pbm(const std::string& path);

}  // namespace thdbar::armask
