// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <random>

#include "test_util.hpp"
#include "thdbar/armask.hpp"
#include "thdbar/error.hpp"

using namespace thdbar;
using namespace thdbar::armask;

namespace {

std::vector<std::size_t> random_counts(std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> n_scales(1, 4), groups(1, 5);
  std::vector<std::size_t> c(n_scales(rng));
  std::size_t prev = 1;
  for (auto& g : c) {
    g = prev * groups(rng) / 2 + 1;  // non-decreasing-ish, not required
    prev = g;
  }
  return c;
}

}  // namespace

TEST_CASE("flatten lengths and ordering") {
  auto one = flatten(std::vector<std::size_t>{1}, 1);
  CHECK(one.length() == 1);

  const auto h = bth::builtin_hierarchy("test8-4");
  auto o = flatten(h, bth::ScaleSubset::all(h), 5);
  CHECK(o.length() == 75);
  CHECK(o.blocks() == 20);
  // Lexicographic (t, k, g).
  for (std::size_t i = 1; i < o.length(); ++i) {
    const auto& a = o.positions[i - 1];
    const auto& b = o.positions[i];
    CHECK(std::tie(a.t, a.k, a.g) < std::tie(b.t, b.k, b.g));
  }
  for (std::size_t i = 0; i < o.length(); ++i) {
    const auto& p = o.positions[i];
    CHECK(o.position_of(p.t, p.k, p.g) == i);
    CHECK(p.scale == o.scales[p.k]);
    CHECK(o.block_begin[o.block_of(i)] <= i);
    CHECK(i < o.block_begin[o.block_of(i) + 1]);
  }
  CHECK(o.positions[1] == Position{0, 1, 1, 0});
  CHECK(o.positions[15] == Position{1, 0, 0, 0});
  CHECK_THROWS_AS(o.position_of(5, 0, 0), Error);
  CHECK_THROWS_AS(o.position_of(0, 1, 2), Error);

  auto sub = flatten(h, bth::ScaleSubset::from_one_based({1, 4}), 3);
  CHECK(sub.length() == 3 * (1 + 8));
  CHECK(sub.scales == std::vector<std::size_t>{0, 3});
}

TEST_CASE("hand-enumerated scale-time mask for two steps and two scales") {
  auto o = flatten(std::vector<std::size_t>{1, 2}, 2);
  auto m = build_mask(o, MaskMode::ScaleTimeWise);
  // Blocks (0,0) (0,1) (1,0) (1,1).
  const std::vector<std::uint8_t> expected{1, 0, 0, 0,  //
                                           1, 1, 0, 0,  //
                                           1, 1, 1, 0,  //
                                           1, 1, 1, 1};
  CHECK(m.allowed == expected);
  auto t = build_mask(o, MaskMode::TimeWise);
  CHECK(t.allowed == std::vector<std::uint8_t>{1, 0, 0, 0, 0, 1, 0, 0, 1, 1, 1, 0, 1, 1, 0, 1});
  auto s = build_mask(o, MaskMode::ScaleWise);
  CHECK(s.allowed == std::vector<std::uint8_t>{1, 0, 0, 0, 1, 1, 0, 0, 0, 0, 1, 0, 0, 0, 1, 1});

  // Expansion: 6 positions with full diagonal blocks.
  auto e = m.expand(o);
  CHECK(e.length == 6);
  CHECK(e(1, 2));
  CHECK(e(2, 1));
  CHECK(!e(0, 1));
  CHECK(e(3, 2));
  CHECK(!e(3, 4));
  CHECK(e(4, 5));
}

TEST_CASE("degenerate configurations collapse the modes") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    auto counts = random_counts(rng);
    auto o1 = flatten(counts, 1);
    CHECK(build_mask(o1, MaskMode::ScaleTimeWise).allowed == build_mask(o1, MaskMode::ScaleWise).allowed);
    auto os = flatten(std::vector<std::size_t>{counts.back()}, 1 + trial % 4);
    CHECK(build_mask(os, MaskMode::ScaleTimeWise).allowed == build_mask(os, MaskMode::TimeWise).allowed);
  }
}

TEST_CASE("scale-time mask is the union of the time and scale masks") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<std::size_t> steps(1, 6);
  for (int trial = 0; trial < 20; ++trial) {
    auto o = flatten(random_counts(rng), steps(rng));
    auto st = build_mask(o, MaskMode::ScaleTimeWise);
    auto t = build_mask(o, MaskMode::TimeWise);
    auto s = build_mask(o, MaskMode::ScaleWise);
    for (std::size_t i = 0; i < st.allowed.size(); ++i) REQUIRE(st.allowed[i] == (t.allowed[i] | s.allowed[i]));
    auto est = st.expand(o), et = t.expand(o), es = s.expand(o);
    for (std::size_t i = 0; i < est.allowed.size(); ++i) REQUIRE(est.allowed[i] == (et.allowed[i] | es.allowed[i]));
  }
  // Also on built-in hierarchies with scale subsets.
  for (const char* scheme : {"test8-4", "tri12-4", "seed62-5"}) {
    const auto h = bth::builtin_hierarchy(scheme);
    auto o = flatten(h, bth::ScaleSubset::from_one_based({1, 3}), 3);
    auto st = build_mask(o, MaskMode::ScaleTimeWise);
    auto t = build_mask(o, MaskMode::TimeWise);
    auto s = build_mask(o, MaskMode::ScaleWise);
    for (std::size_t i = 0; i < st.allowed.size(); ++i) REQUIRE(st.allowed[i] == (t.allowed[i] | s.allowed[i]));
  }
}

TEST_CASE("masks are reflexive and acyclic apart from self-visibility") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    auto o = flatten(random_counts(rng), 1 + trial % 5);
    for (auto mode : {MaskMode::ScaleWise, MaskMode::TimeWise, MaskMode::ScaleTimeWise}) {
      auto m = build_mask(o, mode);
      for (std::size_t b = 0; b < m.blocks; ++b) {
        CHECK(m(b, b));
        // Only earlier blocks (in flatten order) besides itself.
        for (std::size_t b2 = b + 1; b2 < m.blocks; ++b2) CHECK(!m(b, b2));
      }
      // Expansion is constant on every block pair.
      auto e = m.expand(o);
      for (std::size_t i = 0; i < o.length(); ++i)
        for (std::size_t j = 0; j < o.length(); ++j) REQUIRE(e(i, j) == m(o.block_of(i), o.block_of(j)));
    }
  }
}

TEST_CASE("mask mode names") {
  for (auto mode : {MaskMode::ScaleWise, MaskMode::TimeWise, MaskMode::ScaleTimeWise})
    CHECK(parse_mask_mode(to_string(mode)) == mode);
  CHECK_THROWS_AS(parse_mask_mode("causal"), ConfigError);
}

TEST_CASE("portable bitmap export") {
  auto o = flatten(std::vector<std::size_t>{1, 2}, 2);
  auto e = build_mask(o, MaskMode::ScaleTimeWise).expand(o);
  const auto pbm = to_pbm(e);
  // Header then one byte per 6-bit row, MSB first.
  REQUIRE(pbm.substr(0, 7) == "P4\n6 6\n");
  REQUIRE(pbm.size() == 7 + 6);
  CHECK(static_cast<unsigned char>(pbm[7]) == 0x80);   // 100000
  CHECK(static_cast<unsigned char>(pbm[8]) == 0xE0);   // 111000
  CHECK(static_cast<unsigned char>(pbm[10]) == 0xF0);  // 111100
  CHECK(static_cast<unsigned char>(pbm[12]) == 0xFC);  // 111111
  CHECK(from_pbm(pbm).allowed == e.allowed);

  const auto h = bth::builtin_hierarchy("test8-4");
  auto big = flatten(h, bth::ScaleSubset::all(h), 5);
  auto eb = build_mask(big, MaskMode::TimeWise).expand(big);
  auto dir = testing::scratch_dir("armask_pbm");
  write_pbm((dir / "m.pbm").string(), eb);
  CHECK(read_pbm((dir / "m.pbm").string()).allowed == eb.allowed);

  CHECK_THROWS_AS(from_pbm("P1\n2 2\n"), FormatError);
  CHECK_THROWS_AS(from_pbm("P4\n6 6\nabc"), FormatError);
  CHECK_THROWS_AS(read_pbm((dir / "none.pbm").string()), Error);
}
