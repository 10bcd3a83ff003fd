// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "thdbar/error.hpp"
#include "thdbar/nn/optim.hpp"
#include "thdbar/signalio.hpp"

static_assert(std::endian::native == std::endian::little, "segment I/O assumes a little-endian host");

namespace thdbar::signalio {
namespace {

std::vector<std::string> split_names(const char* csv) {
  std::vector<std::string> out;
  std::istringstream in(csv);
  std::string name;
  while (std::getline(in, name, ',')) out.push_back(name);
  return out;
}

const std::map<std::string, MontageSpec>& registry() {
  static const std::map<std::string, MontageSpec> reg = [] {
    std::map<std::string, MontageSpec> m;
    auto put = [&](const char* id, const char* csv) {
      MontageSpec spec{id, split_names(csv)};
      spec.validate();
      m.emplace(id, std::move(spec));
    };
    put("seed62",
        "FP1,FPZ,FP2,AF3,AF4,F7,F5,F3,F1,FZ,F2,F4,F6,F8,FT7,FC5,FC3,FC1,FCZ,FC2,FC4,FC6,FT8,T7,C5,C3,C1,CZ,C2,C4,"
        "C6,T8,TP7,CP5,CP3,CP1,CPZ,CP2,CP4,CP6,TP8,P7,P5,P3,P1,PZ,P2,P4,P6,P8,PO7,PO5,PO3,POZ,PO4,PO6,PO8,CB1,O1,OZ,"
        "O2,CB2");
    put("test8", "F3,F4,C3,C4,P3,P4,O1,O2");
    put("tri12", "FP1,FP2,F3,F4,C3,C4,T7,T8,P3,P4,O1,O2");
    put("tiny2", "A,B");
    return m;
  }();
  return reg;
}

std::string upper(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

template <typename T>
void put(char* dst, T v) {
  std::memcpy(dst, &v, sizeof(T));
}

template <typename T>
T get(const char* src) {
  T v;
  std::memcpy(&v, src, sizeof(T));
  return v;
}

}  // namespace

std::size_t MontageSpec::index_of(const std::string& name) const {
  const auto key = upper(name);
  for (std::size_t i = 0; i < channel_names.size(); ++i)
    if (upper(channel_names[i]) == key) return i;
  throw Error("unknown channel " + name + " in montage " + montage_id);
}

void MontageSpec::validate() const {
  std::set<std::string> seen;
  for (const auto& n : channel_names)
    if (!seen.insert(upper(n)).second) throw Error("duplicated channel name " + n + " in montage " + montage_id);
  if (channel_names.empty()) throw Error("montage " + montage_id + " has no channels");
}

const MontageSpec& montage(const std::string& montage_id) {
  const auto& reg = registry();
  auto it = reg.find(montage_id);
  if (it == reg.end()) throw ConfigError("montage unknown: " + montage_id);
  return it->second;
}

std::vector<std::string> montage_ids() {
  std::vector<std::string> out;
  for (const auto& [id, spec] : registry()) out.push_back(id);
  return out;
}

std::vector<double> EegSegment::channel(std::size_t ch) const {
  return std::vector<double>(data.begin() + static_cast<std::ptrdiff_t>(ch * n_samples),
                             data.begin() + static_cast<std::ptrdiff_t>((ch + 1) * n_samples));
}

void EegSegment::validate() const {
  if (!(rate > 0.0f) || !std::isfinite(rate)) throw Error("invalid segment: rate must be positive");
  if (data.size() != n_channels * n_samples) throw Error("dimension mismatch: data size does not match channels x samples");
  for (float v : data)
    if (!std::isfinite(v)) throw Error("invalid segment: non-finite sample");
}

bool EegSegment::operator==(const EegSegment& o) const {
  return montage_id == o.montage_id && std::bit_cast<std::uint32_t>(rate) == std::bit_cast<std::uint32_t>(o.rate) &&
         n_channels == o.n_channels && n_samples == o.n_samples && label == o.label &&
         data.size() == o.data.size() &&
         (data.empty() || std::memcmp(data.data(), o.data.data(), data.size() * sizeof(float)) == 0);
}

std::uint64_t montage_hash(const std::string& montage_id) { return nn::fnv1a64(montage_id.data(), montage_id.size()); }

void write_segment(const EegSegment& seg, const std::string& path) {
  seg.validate();
  if (seg.montage_id.size() > 31) throw Error("montage id too long for segment header: " + seg.montage_id);
  if (seg.n_channels > UINT32_MAX || seg.n_samples > UINT32_MAX) throw Error("segment too large for format");
  char header[kSegmentHeaderBytes] = {};
  std::memcpy(header, "THDS", 4);
  put<std::uint32_t>(header + 4, kSegmentVersion);
  put<std::uint64_t>(header + 8, montage_hash(seg.montage_id));
  put<std::uint32_t>(header + 16, static_cast<std::uint32_t>(seg.n_channels));
  put<std::uint32_t>(header + 20, static_cast<std::uint32_t>(seg.n_samples));
  put<float>(header + 24, seg.rate);
  std::memcpy(header + 32, seg.montage_id.data(), seg.montage_id.size());

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write segment: " + path);
  out.write(header, kSegmentHeaderBytes);
  out.write(reinterpret_cast<const char*>(seg.data.data()), static_cast<std::streamsize>(seg.data.size() * sizeof(float)));
  if (!out) throw Error("cannot write segment: " + path);
}

EegSegment read_segment(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read segment: " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < kSegmentHeaderBytes || std::memcmp(buf.data(), "THDS", 4) != 0)
    throw FormatError("malformed header: " + path);
  const char* h = buf.data();
  if (get<std::uint32_t>(h + 4) != kSegmentVersion)
    throw FormatError("unknown format version " + std::to_string(get<std::uint32_t>(h + 4)) + ": " + path);
  EegSegment seg;
  seg.montage_id.assign(h + 32, strnlen(h + 32, 32));
  if (get<std::uint64_t>(h + 8) != montage_hash(seg.montage_id))
    throw FormatError("malformed header: montage hash mismatch in " + path);
  seg.n_channels = get<std::uint32_t>(h + 16);
  seg.n_samples = get<std::uint32_t>(h + 20);
  seg.rate = get<float>(h + 24);
  const std::size_t payload = buf.size() - kSegmentHeaderBytes;
  if (payload != seg.n_channels * seg.n_samples * sizeof(float))
    throw FormatError("dimension mismatch: header promises " + std::to_string(seg.n_channels) + "x" +
                      std::to_string(seg.n_samples) + " samples, payload holds " + std::to_string(payload) + " bytes");
  seg.data.resize(seg.n_channels * seg.n_samples);
  std::memcpy(seg.data.data(), buf.data() + kSegmentHeaderBytes, payload);
  if (!(seg.rate > 0.0f)) throw FormatError("malformed header: non-positive rate in " + path);
  return seg;
}

std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "train";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw FormatError("unknown split: " + s);
}

std::vector<ManifestEntry> DatasetManifest::of_split(Split s) const {
  std::vector<ManifestEntry> out;
  for (const auto& e : entries)
    if (e.split == s) out.push_back(e);
  return out;
}

void DatasetManifest::validate(const std::string& base_dir) const {
  std::map<std::string, Split> seen;
  for (const auto& e : entries) {
    auto [it, fresh] = seen.emplace(e.path, e.split);
    if (!fresh && it->second != e.split) throw Error("splits not disjoint: " + e.path + " appears in two splits");
    if (!base_dir.empty()) {
      std::filesystem::path p(e.path);
      if (p.is_relative()) p = std::filesystem::path(base_dir) / p;
      if (!std::filesystem::exists(p)) throw Error("unresolvable manifest path: " + p.string());
    }
  }
}

void write_manifest(const DatasetManifest& m, const std::string& path) {
  m.validate();
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write manifest: " + path);
  for (const auto& e : m.entries)
    out << e.path << '\t' << (e.label ? std::to_string(*e.label) : std::string("-")) << '\t' << to_string(e.split)
        << '\n';
}

DatasetManifest read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("missing upstream artifact: " + path);
  DatasetManifest m;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string p, label, split;
    if (!std::getline(ls, p, '\t') || !std::getline(ls, label, '\t') || !std::getline(ls, split))
      throw FormatError("malformed manifest line " + std::to_string(line_no));
    ManifestEntry e{p, std::nullopt, parse_split(split)};
    if (label != "-") {
      try {
        e.label = std::stoi(label);
      } catch (const std::exception&) {
        throw FormatError("malformed manifest label on line " + std::to_string(line_no));
      }
    }
    m.entries.push_back(std::move(e));
  }
  m.validate(std::filesystem::path(path).parent_path().string());
  return m;
}

std::string resolve_entry(const std::string& manifest_path, const ManifestEntry& e) {
  std::filesystem::path p(e.path);
  if (p.is_relative()) p = std::filesystem::path(manifest_path).parent_path() / p;
  return p.string();
}

}  // namespace thdbar::signalio
