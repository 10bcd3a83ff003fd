// SPDX-License-Identifier: Apache-2.0
#include "thdbar/armask.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "thdbar/error.hpp"

namespace thdbar::armask {

namespace {

FlattenOrder build(std::vector<std::size_t> scales, std::vector<std::size_t> counts, std::size_t steps) {
  if (steps == 0) throw Error("flatten needs at least one time step");
  if (counts.empty()) throw Error("flatten needs at least one scale");
  FlattenOrder o;
  o.steps = steps;
  o.scales = std::move(scales);
  o.group_counts = std::move(counts);
  o.block_begin.push_back(0);
  for (std::size_t t = 0; t < steps; ++t)
    for (std::size_t k = 0; k < o.scales.size(); ++k) {
      if (o.group_counts[k] == 0) throw Error("flatten: scale without groups");
      for (std::size_t g = 0; g < o.group_counts[k]; ++g) o.positions.push_back({t, k, o.scales[k], g});
      o.block_begin.push_back(o.positions.size());
    }
  return o;
}

}  // namespace

std::size_t FlattenOrder::block_of(std::size_t pos) const {
  if (pos >= length()) throw Error("position out of range");
  return positions[pos].t * scales.size() + positions[pos].k;
}

std::size_t FlattenOrder::position_of(std::size_t t, std::size_t k, std::size_t g) const {
  if (t >= steps || k >= scales.size() || g >= group_counts[k]) throw Error("(t, scale, group) out of range");
  return block_begin[block_id(t, k)] + g;
}

FlattenOrder flatten(const bth::Hierarchy& h, const bth::ScaleSubset& subset, std::size_t steps) {
  subset.validate(h);
  std::vector<std::size_t> counts;
  for (auto s : subset.scales) counts.push_back(h.groups(s));
  return build(subset.scales, std::move(counts), steps);
}

FlattenOrder flatten(const std::vector<std::size_t>& group_counts, std::size_t steps) {
  std::vector<std::size_t> scales(group_counts.size());
  for (std::size_t i = 0; i < scales.size(); ++i) scales[i] = i;
  return build(std::move(scales), group_counts, steps);
}

std::string to_string(MaskMode m) {
  switch (m) {
    case MaskMode::ScaleWise:
      return "scale_wise";
    case MaskMode::TimeWise:
      return "time_wise";
    case MaskMode::ScaleTimeWise:
      return "scale_time_wise";
  }
  return "?";
}

MaskMode parse_mask_mode(const std::string& s) {
  if (s == "scale_wise") return MaskMode::ScaleWise;
  if (s == "time_wise") return MaskMode::TimeWise;
  if (s == "scale_time_wise") return MaskMode::ScaleTimeWise;
  throw ConfigError("unknown mask mode: " + s + " (expected scale_wise, time_wise or scale_time_wise)");
}

BlockMask build_mask(const FlattenOrder& order, MaskMode mode) {
  BlockMask m;
  m.mode = mode;
  m.blocks = order.blocks();
  m.allowed.assign(m.blocks * m.blocks, 0);
  const std::size_t S = order.scales_per_step();
  for (std::size_t b = 0; b < m.blocks; ++b)
    for (std::size_t b2 = 0; b2 < m.blocks; ++b2) {
      const std::size_t t = b / S, s = b % S, t2 = b2 / S, s2 = b2 % S;
      bool ok = false;
      switch (mode) {
        case MaskMode::ScaleTimeWise:
          ok = t2 < t || (t2 == t && s2 <= s);
          break;
        case MaskMode::TimeWise:
          ok = t2 < t || b2 == b;
          break;
        case MaskMode::ScaleWise:
          ok = t2 == t && s2 <= s;
          break;
      }
      m.allowed[b * m.blocks + b2] = ok ? 1 : 0;
    }
  return m;
}

nn::AttentionMask BlockMask::expand(const FlattenOrder& order) const {
  if (order.blocks() != blocks) throw ShapeError("dimension mismatch between block mask and order");
  nn::AttentionMask out;
  out.length = order.length();
  out.allowed.assign(out.length * out.length, 0);
  for (std::size_t b = 0; b < blocks; ++b)
    for (std::size_t b2 = 0; b2 < blocks; ++b2) {
      if (!(*this)(b, b2)) continue;
      for (std::size_t i = order.block_begin[b]; i < order.block_begin[b + 1]; ++i)
        std::fill(out.allowed.begin() + static_cast<std::ptrdiff_t>(i * out.length + order.block_begin[b2]),
                  out.allowed.begin() + static_cast<std::ptrdiff_t>(i * out.length + order.block_begin[b2 + 1]), 1);
    }
  return out;
}

std::string to_pbm(const nn::AttentionMask& mask) {
  const std::size_t n = mask.length;
  std::string out = "P4\n" + std::to_string(n) + " " + std::to_string(n) + "\n";
  const std::size_t row_bytes = (n + 7) / 8;
  for (std::size_t i = 0; i < n; ++i) {
    std::string row(row_bytes, '\0');
    for (std::size_t j = 0; j < n; ++j)
      if (mask(i, j)) row[j / 8] = static_cast<char>(static_cast<unsigned char>(row[j / 8]) | (0x80u >> (j % 8)));
    out += row;
  }
  return out;
}

nn::AttentionMask from_pbm(const std::string& bytes) {
  std::istringstream in(bytes);
  std::string magic;
  std::size_t cols = 0, rows = 0;
  in >> magic;
  // Comments are not produced by to_pbm and not accepted here.
  if (magic != "P4" || !(in >> cols >> rows)) throw FormatError("malformed bitmap header");
  if (cols != rows) throw FormatError("dimension mismatch: attention bitmap must be square");
  if (in.get() != '\n') throw FormatError("malformed bitmap header");
  const auto start = static_cast<std::size_t>(in.tellg());
  const std::size_t row_bytes = (cols + 7) / 8;
  if (bytes.size() != start + row_bytes * rows) throw FormatError("dimension mismatch: bitmap payload size");
  nn::AttentionMask m;
  m.length = rows;
  m.allowed.assign(rows * cols, 0);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) {
      const auto byte = static_cast<unsigned char>(bytes[start + i * row_bytes + j / 8]);
      m.allowed[i * cols + j] = (byte >> (7 - j % 8)) & 1u;
    }
  return m;
}

void write_pbm(const std::string& path, const nn::AttentionMask& mask) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path);
  const auto s = to_pbm(mask);
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

nn::AttentionMask read_pbm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("missing upstream artifact: " + path);
  return from_pbm(std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>()));
}

}  // namespace thdbar::armask
