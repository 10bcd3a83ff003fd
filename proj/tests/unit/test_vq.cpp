// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <random>

#include "test_util.hpp"
#include "thdbar/error.hpp"
#include "thdbar/nn/optim.hpp"
#include "thdbar/vq.hpp"

using namespace thdbar;
using namespace thdbar::vq;

namespace {

FeatureMap random_map(std::size_t g, std::size_t t, std::size_t c, std::uint64_t seed, double scale = 1.0) {
  FeatureMap m(g, t, c);
  m.values = testing::random_values(m.values.size(), seed, scale);
  return m;
}

double sq_dist(const FeatureMap& a, const FeatureMap& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) s += (a.values[i] - b.values[i]) * (a.values[i] - b.values[i]);
  return s;
}

RefineMaps random_phi(const bth::ScaleSubset& subset, std::size_t C, std::uint64_t seed) {
  auto phi = RefineMaps::identity(subset, C);
  for (std::size_t i = 0; i < phi.convs.size(); ++i) {
    auto w = testing::random_values(3 * C * C, seed + i, 0.3);
    auto b = testing::random_values(C, seed + 50 + i, 0.1);
    for (std::size_t k = 0; k < w.size(); ++k) phi.convs[i].weight.value()[k] += w[k];
    std::copy(b.begin(), b.end(), phi.convs[i].bias.value().begin());
  }
  return phi;
}

}  // namespace

TEST_CASE("quantize hand examples and tie-break") {
  Codebook cb(2, 2, {0.0, 0.0, 1.0, 1.0});
  FeatureMap f(1, 1, 2);
  f.values = {0.1, 0.1};
  CHECK(quantize(f, cb).at(0, 0) == 0);
  f.values = {1.0, 1.0};
  CHECK(quantize(f, cb).at(0, 0) == 1);

  std::vector<double> rows(8 * 2, 50.0);
  rows[3 * 2] = -1.0, rows[3 * 2 + 1] = 0.0;
  rows[7 * 2] = 1.0, rows[7 * 2 + 1] = 0.0;
  Codebook tie(8, 2, rows);
  f.values = {0.0, 0.0};
  CHECK(quantize(f, tie).at(0, 0) == 3);

  f.values = {std::nan(""), 0.0};
  CHECK_THROWS_AS(quantize(f, cb), Error);
}

TEST_CASE("quantize matches an exhaustive scan on random instances") {
  std::mt19937_64 rng(2024);
  for (int inst = 0; inst < 200; ++inst) {
    const std::size_t V = 2 + rng() % 63, C = 1 + rng() % 8;
    auto cb = Codebook::random(V, C, rng);
    // Every fifth instance duplicates rows to exercise ties.
    if (inst % 5 == 0)
      for (std::size_t k = V / 2; k < V; ++k) std::copy_n(cb.vectors.data() + (k - V / 2) * C, C, cb.vectors.data() + k * C);
    auto f = random_map(3, 4, C, 7000 + static_cast<std::uint64_t>(inst));
    auto r = quantize(f, cb);
    for (std::size_t g = 0; g < 3; ++g)
      for (std::size_t t = 0; t < 4; ++t) {
        std::vector<long double> d(V, 0.0L);
        for (std::size_t k = 0; k < V; ++k)
          for (std::size_t c = 0; c < C; ++c) {
            const long double e = static_cast<long double>(f.at(g, t, c)) - cb.vectors[k * C + c];
            d[k] += e * e;
          }
        std::size_t best = 0;
        for (std::size_t k = 1; k < V; ++k)
          if (d[k] < d[best]) best = k;
        CHECK(r.at(g, t) == best);
      }
  }
}

TEST_CASE("lookup") {
  std::mt19937_64 rng(1);
  auto cb = Codebook::random(16, 2, rng);
  TokenMap all5(0, 2, 3);
  std::fill(all5.tokens.begin(), all5.tokens.end(), 5u);
  auto z = lookup(cb, all5);
  for (std::size_t g = 0; g < 2; ++g)
    for (std::size_t t = 0; t < 3; ++t)
      for (std::size_t c = 0; c < 2; ++c) CHECK(z.at(g, t, c) == cb.row(5)[c]);

  FeatureMap rows(1, 16, 2);
  rows.values = cb.vectors;
  CHECK(lookup(cb, quantize(rows, cb)).values == cb.vectors);

  auto f = random_map(4, 6, 2, 9);
  auto rec = lookup(cb, quantize(f, cb));
  for (std::size_t g = 0; g < 4; ++g)
    for (std::size_t t = 0; t < 6; ++t) {
      double best = 1e300;
      for (std::size_t k = 0; k < 16; ++k) {
        const double dx = f.at(g, t, 0) - cb.row(static_cast<Token>(k))[0], dy = f.at(g, t, 1) - cb.row(static_cast<Token>(k))[1];
        best = std::min(best, dx * dx + dy * dy);
      }
      const double dx = f.at(g, t, 0) - rec.at(g, t, 0), dy = f.at(g, t, 1) - rec.at(g, t, 1);
      CHECK(dx * dx + dy * dy == best);
    }
  all5.tokens[0] = 16;
  CHECK_THROWS_AS(lookup(cb, all5), Error);
}

TEST_CASE("single finest scale with identity phi is plain quantization") {
  auto h = bth::builtin_hierarchy("test8-4");
  std::mt19937_64 rng(3);
  auto cb = Codebook::random(32, 4, rng);
  auto subset = bth::ScaleSubset::finest_only(h);
  auto f = random_map(8, 5, 4, 10);
  auto R = encode_multiscale(f, h, subset, cb, RefineMaps::identity(subset, 4));
  REQUIRE(R.maps.size() == 1);
  CHECK(R.maps[0].tokens == quantize(f, cb, 3).tokens);
  CHECK(decode_multiscale(R, h, cb, RefineMaps::identity(subset, 4)).values == lookup(cb, R.maps[0]).values);
}

TEST_CASE("two-scale hand trace: coarse captures a broadcast row, fine takes the near-zero code") {
  auto h = bth::builtin_hierarchy("test8-4");
  Codebook cb(2, 2, {2.0, -1.0, 0.1, 0.1});
  auto subset = bth::ScaleSubset::from_one_based({1, 4});
  FeatureMap f(8, 3, 2);
  for (std::size_t g = 0; g < 8; ++g)
    for (std::size_t t = 0; t < 3; ++t) f.at(g, t, 0) = 2.0, f.at(g, t, 1) = -1.0;
  EncodeTrace trace;
  auto R = encode_multiscale(f, h, subset, cb, RefineMaps::identity(subset, 2), &trace);
  for (auto tok : R.maps[0].tokens) CHECK(tok == 0);
  for (auto tok : R.maps[1].tokens) CHECK(tok == 1);
  for (double v : trace.pooled[1].values) CHECK(v == 0.0);
}

TEST_CASE("telescoping identity holds at every step with any phi") {
  for (const char* scheme : {"test8-4", "tri12-4", "seed62-5"}) {
    auto h = bth::builtin_hierarchy(scheme);
    std::mt19937_64 rng(h.n_channels());
    auto cb = Codebook::random(24, 3, rng);
    auto subset = bth::ScaleSubset::all(h);
    auto phi = random_phi(subset, 3, 77);
    auto f = random_map(h.n_channels(), 5, 3, 12);
    EncodeTrace tr;
    encode_multiscale(f, h, subset, cb, phi, &tr);
    FeatureMap acc(h.n_channels(), 5, 3);
    for (std::size_t k = 0; k <= subset.size(); ++k) {
      const auto& resid = k < subset.size() ? tr.residual_before[k] : tr.residual_after;
      for (std::size_t i = 0; i < f.values.size(); ++i) CHECK(std::abs(resid.values[i] + acc.values[i] - f.values[i]) < 1e-10);
      if (k < subset.size())
        for (std::size_t i = 0; i < f.values.size(); ++i) acc.values[i] += tr.contribution[k].values[i];
    }
    // Decoding the same tokens reproduces the accumulated contributions.
    auto R = encode_multiscale(f, h, subset, cb, phi);
    auto dec = decode_multiscale(R, h, cb, phi);
    for (std::size_t i = 0; i < f.values.size(); ++i) CHECK(dec.values[i] == doctest::Approx(acc.values[i]).epsilon(1e-12));
  }
}

TEST_CASE("phi evaluated on the coarse map equals phi on the upscaled map") {
  auto h = bth::builtin_hierarchy("test8-4");
  auto subset = bth::ScaleSubset::all(h);
  auto phi = random_phi(subset, 3, 5);
  auto z = random_map(2, 6, 3, 8);
  auto a = bth::upscale(phi.apply(1, z), h, 1, 3);
  auto b = phi.apply(1, bth::upscale(z, h, 1, 3));
  CHECK(a.values == b.values);
}

TEST_CASE("prefix reconstruction error is non-increasing when the codebook holds zero") {
  auto h = bth::builtin_hierarchy("seed62-5");
  auto subset = bth::ScaleSubset::all(h);
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    std::mt19937_64 rng(seed);
    auto cb = Codebook::random(64, 4, rng);
    std::fill_n(cb.vectors.begin(), 4, 0.0);
    auto phi = RefineMaps::identity(subset, 4);
    auto f = random_map(62, 5, 4, 100 + seed);
    auto R = encode_multiscale(f, h, subset, cb, phi);
    double prev = sq_dist(f, FeatureMap(62, 5, 4));
    for (std::size_t k = 1; k <= subset.size(); ++k) {
      const double e = sq_dist(f, decode_multiscale(R, h, cb, phi, k));
      CHECK(e <= prev + 1e-12);
      prev = e;
    }
  }
}

TEST_CASE("full subset is not always better than finest-only on an arbitrary codebook") {
  // Counterexample for the unconditional ordering: features that are
  // distinct codebook rows are reconstructed exactly by finest-only.
  auto h = bth::builtin_hierarchy("test8-4");
  std::mt19937_64 rng(4);
  auto cb = Codebook::random(8, 2, rng);
  FeatureMap f(8, 1, 2);
  for (std::size_t g = 0; g < 8; ++g) std::copy_n(cb.row(static_cast<Token>(g)), 2, f.row(g, 0));
  auto fine = bth::ScaleSubset::finest_only(h), full = bth::ScaleSubset::all(h);
  auto e_fine = sq_dist(f, decode_multiscale(encode_multiscale(f, h, fine, cb, RefineMaps::identity(fine, 2)), h, cb,
                                             RefineMaps::identity(fine, 2)));
  auto e_full = sq_dist(f, decode_multiscale(encode_multiscale(f, h, full, cb, RefineMaps::identity(full, 2)), h, cb,
                                             RefineMaps::identity(full, 2)));
  CHECK(e_fine == 0.0);
  CHECK(e_full > 0.0);
}

TEST_CASE("decode of encode is exact for features planted from codebook rows") {
  // C = 4: dimension s carries the scale-s code; finer codes are signed so
  // they average to zero inside every coarser group.
  auto h = bth::builtin_hierarchy("test8-4");
  auto subset = bth::ScaleSubset::all(h);
  std::vector<double> rows = {0, 0, 0, 0};  // code 0: zero
  for (int k = 1; k <= 3; ++k) rows.insert(rows.end(), {10.0 * k, 0, 0, 0});
  for (int d = 1; d < 4; ++d)
    for (double sgn : {1.0, -1.0}) {
      std::vector<double> r(4, 0.0);
      r[static_cast<std::size_t>(d)] = sgn;
      rows.insert(rows.end(), r.begin(), r.end());
    }
  Codebook cb(rows.size() / 4, 4, rows);
  auto code = [](int dim, bool plus) { return static_cast<Token>(4 + 2 * (dim - 1) + (plus ? 0 : 1)); };
  std::mt19937_64 rng(6);
  MultiScaleTokens planted;
  planted.steps = 4;
  for (std::size_t s = 0; s < 4; ++s) planted.maps.emplace_back(s, h.groups(s), 4);
  for (std::size_t t = 0; t < 4; ++t) {
    planted.maps[0].at(0, t) = static_cast<Token>(1 + rng() % 3);
    for (std::size_t s = 1; s < 4; ++s)
      for (std::size_t g = 0; g < h.groups(s); g += 2) {
        const bool plus = rng() % 2 == 0;  // sibling pairs take opposite signs
        planted.maps[s].at(g, t) = code(static_cast<int>(s), plus);
        planted.maps[s].at(g + 1, t) = code(static_cast<int>(s), !plus);
      }
  }
  auto phi = RefineMaps::identity(subset, 4);
  auto f = decode_multiscale(planted, h, cb, phi);
  auto R = encode_multiscale(f, h, subset, cb, phi);
  CHECK(R == planted);
  CHECK(decode_multiscale(R, h, cb, phi).values == f.values);
}

TEST_CASE("EMA update moves only assigned rows") {
  std::mt19937_64 rng(8);
  auto cb = Codebook::random(4, 3, rng);
  const auto before = cb.vectors;
  std::vector<double> feats = {1.0, 2.0, 3.0, 1.0, 2.0, 3.0};
  std::vector<Token> toks = {2, 2};
  auto res = codebook_train_step(cb, feats, toks);
  for (std::size_t k = 0; k < 4; ++k)
    for (std::size_t c = 0; c < 3; ++c) {
      if (k == 2) {
        const double x = feats[c];
        CHECK(std::abs(cb.vectors[k * 3 + c] - x) < std::abs(before[k * 3 + c] - x));
      } else {
        CHECK(cb.vectors[k * 3 + c] == doctest::Approx(before[k * 3 + c]).epsilon(1e-15));
      }
    }
  double commit = 0.0;
  for (std::size_t c = 0; c < 3; ++c) commit += (feats[c] - before[2 * 3 + c]) * (feats[c] - before[2 * 3 + c]);
  CHECK(res.commitment == doctest::Approx(0.25 * commit).epsilon(1e-14));
}

TEST_CASE("one EMA step with one feature equals 0.99 row + 0.01 x") {
  Codebook cb(2, 1, {4.0, -7.0});
  std::vector<double> x = {10.0};
  std::vector<Token> k = {0};
  codebook_train_step(cb, x, k);
  CHECK(cb.vectors[0] == doctest::Approx(0.99 * 4.0 + 0.01 * 10.0).epsilon(1e-15));
  CHECK(cb.vectors[1] == doctest::Approx(-7.0).epsilon(1e-15));
  CHECK_THROWS_AS(codebook_train_step(cb, std::vector<double>{}, std::vector<Token>{}), Error);
}

TEST_CASE("dead codes are reseeded after two idle epochs") {
  Codebook cb(3, 2, {0.0, 0.0, 5.0, 5.0, 9.0, 9.0});
  std::vector<double> feats = {0.1, 0.2, 0.3, 0.4};
  std::vector<Token> toks = {0, 0};
  std::mt19937_64 rng(1);
  codebook_train_step(cb, feats, toks);
  CHECK(end_epoch(cb, feats, rng) == 0);
  codebook_train_step(cb, feats, toks);
  CHECK(end_epoch(cb, feats, rng) == 2);
  for (std::size_t k = 1; k < 3; ++k) {
    const bool from_batch = (cb.vectors[k * 2] == 0.1 && cb.vectors[k * 2 + 1] == 0.2) ||
                            (cb.vectors[k * 2] == 0.3 && cb.vectors[k * 2 + 1] == 0.4);
    CHECK(from_batch);
    CHECK(cb.idle_epochs[k] == 0);
  }
}

TEST_CASE("phi convolution passes a finite-difference gradient check") {
  auto subset = bth::ScaleSubset::from_one_based({1});
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    auto phi = random_phi(subset, 3, seed);
    auto x = nn::Tensor::constant({2, 6, 3}, testing::random_values(36, seed + 9));
    const auto& conv = phi.convs[0];
    auto probe = testing::random_values(36, seed + 19);
    auto res = nn::grad_check([&] { return nn::dot_const(conv(x), probe); }, {conv.weight, conv.bias}, 1e-5);
    CHECK(res.max_rel_error < 1e-5);
  }
}

TEST_CASE("codebook file round-trip") {
  auto dir = testing::scratch_dir("vq_codebook");
  std::vector<double> rows = {0.5, -1.25, 3.0, 0.0, 2.5, 8.0};
  Codebook cb(3, 2, rows);
  auto subset = bth::ScaleSubset::from_one_based({1, 3});
  auto phi = RefineMaps::identity(subset, 2);
  phi.convs[1].bias.value()[1] = 0.75;
  auto path = (dir / "cb.bin").string();
  write_codebook(path, cb, phi);
  auto [cb2, phi2] = read_codebook(path);
  CHECK(cb2.vectors == rows);
  CHECK(phi2.scales == subset.scales);
  CHECK(phi2.convs[1].bias.value()[1] == 0.75);
  CHECK(std::vector<double>(phi2.convs[0].weight.value().begin(), phi2.convs[0].weight.value().end()) ==
        std::vector<double>(phi.convs[0].weight.value().begin(), phi.convs[0].weight.value().end()));
  CHECK_THROWS_WITH_AS(read_codebook((dir / "none.bin").string()), doctest::Contains("missing upstream artifact"), Error);
}

TEST_CASE("token file round-trip and record count") {
  auto dir = testing::scratch_dir("vq_tokens");
  auto h = bth::builtin_hierarchy("test8-4");
  std::mt19937_64 rng(2);
  auto cb = Codebook::random(300, 2, rng);
  auto subset = bth::ScaleSubset::all(h);
  TokenCorpus corpus;
  corpus.scheme = "test8-4";
  corpus.group_counts = h.group_counts();
  corpus.scales = subset.scales;
  corpus.steps = 5;
  corpus.V = 300;
  for (int i = 0; i < 3; ++i) {
    corpus.sequences.push_back(encode_multiscale(random_map(8, 5, 2, 40 + static_cast<std::uint64_t>(i)), h, subset, cb,
                                                 RefineMaps::identity(subset, 2)));
    corpus.labels.push_back(i == 1 ? std::nullopt : std::optional<int>(i));
    corpus.split.push_back(static_cast<std::uint8_t>(i));
  }
  CHECK(corpus.records_per_sequence() == 75);
  auto path = (dir / "tokens.bin").string();
  write_tokens(path, corpus);
  const auto header = 4 + 4 + 4 + 4 + 2 + 7 + 1 + 4 * 2 + 1 + 4 + 4;
  CHECK(std::filesystem::file_size(path) == static_cast<std::uintmax_t>(header + 3 * (5 + 75 * 7)));
  auto back = read_tokens(path);
  CHECK(back.sequences == corpus.sequences);
  CHECK(back.labels == corpus.labels);
  CHECK(back.split == corpus.split);
  CHECK(back.scheme == "test8-4");

  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 3);
  CHECK_THROWS_WITH_AS(read_tokens(path), doctest::Contains("truncated"), FormatError);
}

TEST_CASE("shape validation") {
  auto h = bth::builtin_hierarchy("test8-4");
  std::mt19937_64 rng(2);
  auto cb = Codebook::random(4, 2, rng);
  auto subset = bth::ScaleSubset::all(h);
  CHECK_THROWS_AS(encode_multiscale(random_map(4, 2, 2, 1), h, subset, cb, RefineMaps::identity(subset, 2)), ShapeError);
  CHECK_THROWS_WITH_AS(encode_multiscale(random_map(8, 2, 2, 1), h, bth::ScaleSubset::from_one_based({1, 6}), cb,
                                         RefineMaps::identity(subset, 2)),
                       doctest::Contains("subset/hierarchy mismatch"), ConfigError);
  auto R = encode_multiscale(random_map(8, 2, 2, 1), h, subset, cb, RefineMaps::identity(subset, 2));
  CHECK_THROWS_WITH_AS(decode_multiscale(R, h, cb, RefineMaps::identity(bth::ScaleSubset::from_one_based({1}), 2)),
                       doctest::Contains("scale mismatch"), Error);
  CHECK_THROWS_AS(Codebook(1, 2, {0.0, 0.0}), ConfigError);
}
