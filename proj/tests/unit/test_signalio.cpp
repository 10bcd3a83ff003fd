// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "test_util.hpp"
#include "thdbar/bth.hpp"
#include "thdbar/error.hpp"
#include "thdbar/signalio.hpp"

using namespace thdbar;
using namespace thdbar::signalio;

namespace {

std::vector<unsigned char> file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Little-endian decode by shifting, independent of the writer's memcpy path.
std::uint64_t le(const std::vector<unsigned char>& b, std::size_t off, std::size_t n) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(b[off + i]) << (8 * i);
  return v;
}

// Naive one-sided single-bin periodogram 2|sum x_n e^{-i w n}|^2 / N, so a
// tone's value equals its energy when it sits on a DFT bin.
double band_power(const std::vector<double>& x, double hz, double rate) {
  double re = 0.0, im = 0.0;
  const double w = 2.0 * std::numbers::pi * hz / rate;
  for (std::size_t n = 0; n < x.size(); ++n) {
    re += x[n] * std::cos(w * static_cast<double>(n));
    im -= x[n] * std::sin(w * static_cast<double>(n));
  }
  return 2.0 * (re * re + im * im) / static_cast<double>(x.size());
}

EegSegment small_segment() {
  EegSegment s;
  s.montage_id = "tiny2";
  s.rate = 200.0f;
  s.n_channels = 2;
  s.n_samples = 10;
  auto v = testing::random_values(20, 3, 50.0);
  s.data.assign(v.begin(), v.end());
  return s;
}

}  // namespace

TEST_CASE("montage registry") {
  CHECK(montage("seed62").size() == 62);
  CHECK(montage("test8").index_of("c3") == 2);
  CHECK_THROWS_WITH_AS(montage("test8").index_of("Cz"), doctest::Contains("unknown channel"), Error);
  CHECK_THROWS_AS(montage("nope"), ConfigError);
  for (const auto& id : montage_ids()) CHECK_NOTHROW(montage(id).validate());
}

TEST_CASE("segment round-trip is bit-exact") {
  auto dir = testing::scratch_dir("signalio_rt");
  auto seg = small_segment();
  seg.data[3] = -0.0f;
  seg.data[4] = 1e-40f;  // subnormal
  write_segment(seg, (dir / "a.thds").string());
  auto back = read_segment((dir / "a.thds").string());
  back.label = seg.label;
  CHECK(back == seg);
  CHECK(std::signbit(back.data[3]));
}

TEST_CASE("header of a 62-channel segment decodes byte by byte") {
  auto dir = testing::scratch_dir("signalio_hdr");
  EegSegment seg;
  seg.montage_id = "seed62";
  seg.rate = 200.0f;
  seg.n_channels = 62;
  seg.n_samples = 1024;
  seg.data.assign(62 * 1024, 1.5f);
  auto path = (dir / "s.thds").string();
  write_segment(seg, path);
  auto b = file_bytes(path);
  REQUIRE(b.size() == 64 + 62 * 1024 * 4);
  CHECK(std::string(b.begin(), b.begin() + 4) == "THDS");
  CHECK(le(b, 4, 4) == 1);
  CHECK(le(b, 16, 4) == 62);
  CHECK(le(b, 20, 4) == 1024);
  CHECK(le(b, 24, 4) == 0x43480000u);  // 200.0f
  CHECK(std::string(reinterpret_cast<const char*>(b.data()) + 32) == "seed62");
  // FNV-1a 64 of "seed62", computed inline.
  std::uint64_t h = 1469598103934665603ull;
  for (char c : std::string("seed62")) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ull;
  CHECK(le(b, 8, 8) == h);
  CHECK(le(b, 64, 4) == 0x3FC00000u);  // 1.5f
}

TEST_CASE("malformed segment files are rejected") {
  auto dir = testing::scratch_dir("signalio_bad");
  auto seg = small_segment();
  auto path = (dir / "a.thds").string();
  write_segment(seg, path);
  auto bytes = file_bytes(path);

  auto write_bytes = [&](const std::vector<unsigned char>& b) {
    std::ofstream(path, std::ios::binary | std::ios::trunc).write(reinterpret_cast<const char*>(b.data()),
                                                                  static_cast<std::streamsize>(b.size()));
  };
  auto truncated = bytes;
  truncated.resize(truncated.size() - 4);
  write_bytes(truncated);
  CHECK_THROWS_WITH_AS(read_segment(path), doctest::Contains("dimension mismatch"), FormatError);

  auto versioned = bytes;
  versioned[4] = 9;
  write_bytes(versioned);
  CHECK_THROWS_WITH_AS(read_segment(path), doctest::Contains("unknown format version"), FormatError);

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  write_bytes(bad_magic);
  CHECK_THROWS_WITH_AS(read_segment(path), doctest::Contains("malformed header"), FormatError);

  write_bytes({1, 2, 3});
  CHECK_THROWS_WITH_AS(read_segment(path), doctest::Contains("malformed header"), FormatError);

  auto nan_seg = seg;
  nan_seg.data[0] = std::nanf("");
  CHECK_THROWS_AS(write_segment(nan_seg, path), Error);
}

TEST_CASE("manifest round-trip and validation") {
  auto dir = testing::scratch_dir("signalio_manifest");
  auto seg = small_segment();
  write_segment(seg, (dir / "a.thds").string());
  write_segment(seg, (dir / "b.thds").string());
  DatasetManifest m{{{"a.thds", 1, Split::Train}, {"b.thds", std::nullopt, Split::Test}}};
  auto path = (dir / "manifest.tsv").string();
  write_manifest(m, path);
  auto back = read_manifest(path);
  REQUIRE(back.entries.size() == 2);
  CHECK(back.entries[0].label == 1);
  CHECK(!back.entries[1].label);
  CHECK(back.of_split(Split::Test).size() == 1);
  CHECK(read_segment(resolve_entry(path, back.entries[1])) == seg);

  DatasetManifest overlap{{{"a.thds", 0, Split::Train}, {"a.thds", 0, Split::Val}}};
  CHECK_THROWS_WITH_AS(overlap.validate(), doctest::Contains("splits not disjoint"), Error);
  std::ofstream(path) << "missing.thds\t0\ttrain\n";
  CHECK_THROWS_WITH_AS(read_manifest(path), doctest::Contains("unresolvable"), Error);
  CHECK_THROWS_WITH_AS(read_manifest((dir / "none.tsv").string()), doctest::Contains("missing upstream artifact"), Error);
}

TEST_CASE("synthetic generation is deterministic") {
  auto h = bth::builtin_hierarchy("test8-4");
  SyntheticConfig cfg;
  cfg.seed = 42;
  cfg.snr_db = 10.0;
  auto a = generate_synthetic(cfg, h);
  auto b = generate_synthetic(cfg, h);
  CHECK(a.segment == b.segment);
  CHECK(a.label >= 0);
  CHECK(a.label < cfg.n_classes);
  CHECK(a.segment.n_samples == 2048);
  cfg.seed = 43;
  CHECK(!(generate_synthetic(cfg, h).segment == a.segment));

  std::vector<int> seen(2, 0);
  for (std::uint64_t s = 0; s < 40; ++s) {
    cfg.seed = s;
    ++seen[generate_synthetic(cfg, h).label];
  }
  CHECK(seen[0] > 5);
  CHECK(seen[1] > 5);
}

TEST_CASE("noise-free region rhythm is strongest in the labelled region") {
  auto h = bth::builtin_hierarchy("tri12-4");
  SyntheticConfig cfg;
  cfg.montage_id = "tri12";
  cfg.n_classes = 3;
  for (int k = 0; k < 3; ++k) {
    cfg.seed = 100 + static_cast<std::uint64_t>(k);
    auto s = generate_synthetic(cfg, h, k);
    std::vector<double> region_power(3, 0.0);
    for (std::size_t r = 0; r < 3; ++r) {
      for (auto ch : h.group(1, r)) region_power[r] += band_power(s.segment.channel(ch), cfg.region_rhythms_hz[k], cfg.rate);
      region_power[r] /= static_cast<double>(h.group(1, r).size());
    }
    for (std::size_t r = 0; r < 3; ++r)
      if (static_cast<int>(r) != k) CHECK(region_power[static_cast<std::size_t>(k)] > region_power[r]);
  }
}

TEST_CASE("two labels differ only in region-band content") {
  auto h = bth::builtin_hierarchy("test8-4");
  SyntheticConfig cfg;
  cfg.seed = 9;
  auto a = generate_synthetic(cfg, h, 0).segment;
  auto b = generate_synthetic(cfg, h, 1).segment;
  for (std::size_t ch = 0; ch < 8; ++ch) {
    std::vector<double> diff(a.n_samples);
    for (std::size_t i = 0; i < a.n_samples; ++i) diff[i] = double(a.at(ch, i)) - double(b.at(ch, i));
    double total = 0.0;
    for (double d : diff) total += d * d;
    const double planted = band_power(diff, cfg.region_rhythms_hz[0], cfg.rate) +
                           band_power(diff, cfg.region_rhythms_hz[1], cfg.rate);
    const double global = band_power(diff, cfg.global_rhythm_hz, cfg.rate);
    CHECK(total > 0.0);
    // Planted tones account for the difference energy; the shared global
    // rhythm only leaves float32 rounding residue.
    CHECK(planted / total > 0.95);
    CHECK(global / total < 1e-4);
  }
}

TEST_CASE("synthetic config validation") {
  auto h = bth::builtin_hierarchy("test8-4");
  SyntheticConfig cfg;
  cfg.n_classes = 1;
  CHECK_THROWS_AS(generate_synthetic(cfg, h), ConfigError);
  cfg = {};
  cfg.region_rhythms_hz = {6.0, 120.0};
  CHECK_THROWS_AS(generate_synthetic(cfg, h), ConfigError);
  cfg = {};
  cfg.montage_id = "unknown";
  CHECK_THROWS_AS(generate_synthetic(cfg, h), ConfigError);
  cfg = {};
  CHECK_THROWS_AS(generate_synthetic(cfg, h, 2), ConfigError);
}
