// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace thdbar::bth {
class Hierarchy;
}

namespace thdbar::signalio {

struct MontageSpec {
  std::string montage_id;
  std::vector<std::string> channel_names;

  std::size_t size() const { return channel_names.size(); }
  // Index of `name` (case-insensitive), or throws "unknown channel".
  std::size_t index_of(const std::string& name) const;
  void validate() const;
};

// Built-in montages: "seed62", "test8", "tri12", "tiny2".
const MontageSpec& montage(const std::string& montage_id);
std::vector<std::string> montage_ids();

// Multichannel recording in microvolts, channel-major.
struct EegSegment {
  std::string montage_id;
  float rate = 0.0f;
  std::size_t n_channels = 0;
  std::size_t n_samples = 0;
  std::vector<float> data;
  std::optional<int> label;

  float& at(std::size_t ch, std::size_t i) { return data[ch * n_samples + i]; }
  float at(std::size_t ch, std::size_t i) const { return data[ch * n_samples + i]; }
  std::vector<double> channel(std::size_t ch) const;
  void validate() const;

  bool operator==(const EegSegment& other) const;
};

// Fixed 64-byte little-endian header:
//   0  char[4]  magic "THDS"
//   4  u32      format version (1)
//   8  u64      FNV-1a 64 hash of montage_id
//  16  u32      n_channels
//  20  u32      n_samples
//  24  f32      rate
//  28  u32      reserved (0)
//  32  char[32] montage_id, NUL padded
// followed by float32 samples, channel-major. Labels live in the manifest.
inline constexpr std::size_t kSegmentHeaderBytes = 64;
inline constexpr std::uint32_t kSegmentVersion = 1;

void write_segment(const EegSegment& seg, const std::string& path);
EegSegment read_segment(const std::string& path);
std::uint64_t montage_hash(const std::string& montage_id);

enum class Split { Train, Val, Test };
std::string to_string(Split s);
Split parse_split(const std::string& s);

struct ManifestEntry {
  std::string path;
  std::optional<int> label;
  Split split = Split::Train;
};

// Line-oriented `path<TAB>label<TAB>split`; label "-" means unlabeled.
// Relative paths resolve against the manifest's directory.
struct DatasetManifest {
  std::vector<ManifestEntry> entries;

  std::vector<ManifestEntry> of_split(Split s) const;
  void validate(const std::string& base_dir = {}) const;
};

void write_manifest(const DatasetManifest& m, const std::string& path);
DatasetManifest read_manifest(const std::string& path);
// Absolute path of an entry given the manifest file it came from.
std::string resolve_entry(const std::string& manifest_path, const ManifestEntry& e);

struct SyntheticConfig {
  std::string montage_id = "test8";
  double rate = 200.0;
  double duration_s = 10.24;
  int n_classes = 2;
  double global_rhythm_hz = 10.0;
  std::vector<double> region_rhythms_hz{6.0, 17.0, 23.0};
  double global_amplitude_uv = 20.0;
  double region_amplitude_uv = 30.0;
  double snr_db = std::numeric_limits<double>::infinity();
  std::uint64_t seed = 0;

  void validate(const bth::Hierarchy& h) const;
};

struct SyntheticSample {
  EegSegment segment;
  int label = 0;
};

// Global sinusoid on every channel (per-channel gain), plus a sinusoid at
// region_rhythms_hz[label] on the channels of S2 group `label`, plus white
// noise at snr_db. Pure function of (cfg, hierarchy); the label is drawn
// from the seed.
SyntheticSample generate_synthetic(const SyntheticConfig& cfg, const bth::Hierarchy& h);
// Same draw, but with the class fixed by the caller.
SyntheticSample generate_synthetic(const SyntheticConfig& cfg, const bth::Hierarchy& h, int label);

}  // namespace thdbar::signalio
