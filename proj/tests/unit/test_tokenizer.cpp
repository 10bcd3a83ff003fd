// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <fstream>
#include <string>

#include "test_util.hpp"
#include "thdbar/dsp.hpp"
#include "thdbar/error.hpp"
#include "thdbar/tokenizer.hpp"

using namespace thdbar;
using namespace thdbar::tokenizer;

namespace {

WindowSet synthetic_windows(int n_train, int n_val, std::uint64_t seed = 100) {
  const auto h = bth::builtin_hierarchy("test8-4");
  WindowSet ws;
  for (int i = 0; i < n_train + n_val; ++i) {
    signalio::SyntheticConfig sc;
    sc.seed = seed + static_cast<std::uint64_t>(i);
    auto s = signalio::generate_synthetic(sc, h);
    ws.append(dsp::preprocess(s.segment, 50.0), s.label, i < n_train ? signalio::Split::Train : signalio::Split::Val,
              1024, 200);
  }
  return ws;
}

TokenizerConfig small_config() {
  TokenizerConfig c;
  c.codebook_size = 16;
  c.code_dim = 4;
  c.encoder = {1, 16, 32, 2};
  c.decoder = {1, 16, 32, 2};
  c.steps = 3;
  c.batch = 2;
  c.seed = 7;
  return c;
}

const nn::Tensor& param(const nn::ParamList& ps, const std::string& name) {
  for (const auto& p : ps)
    if (p.name == name) return p.tensor;
  FAIL("no parameter " << name);
  return ps.front().tensor;
}

std::vector<nn::Tensor> params_with_prefix(const nn::ParamList& ps, const std::string& prefix) {
  std::vector<nn::Tensor> out;
  for (const auto& p : ps)
    if (p.name.rfind(prefix, 0) == 0) out.push_back(p.tensor);
  return out;
}

}  // namespace

TEST_CASE("lambda schedule matches the tanh form of the logistic ramp") {
  // 2 / (1 + e^-x) - 1 == tanh(x / 2)
  CHECK(lambda_at(0, 100) == 0.0);
  CHECK(lambda_at(100, 100) == doctest::Approx(std::tanh(5.0)).epsilon(1e-12));
  CHECK(std::abs(lambda_at(100, 100) - 0.9999092) < 1e-6);
  CHECK(lambda_at(50, 100) == doctest::Approx(std::tanh(2.5)).epsilon(1e-12));
  CHECK(std::abs(lambda_at(50, 100) - 0.98661) < 1e-5);
  double prev = -1.0;
  for (std::size_t s = 0; s <= 37; ++s) {
    const double l = lambda_at(s, 37);
    CHECK(l >= prev);
    CHECK(l >= 0.0);
    CHECK(l < 1.0);
    prev = l;
  }
  CHECK_THROWS_AS(lambda_at(101, 100), Error);
  CHECK_THROWS_AS(lambda_at(0, 0), Error);
}

TEST_CASE("pcc examples and degenerate variance") {
  const std::vector<double> x{1, 2, 3, 4}, y{1, 2, 3, 5};
  // Computational form: (n Sxy - Sx Sy) / sqrt((n Sxx - Sx^2)(n Syy - Sy^2))
  const double n = 4, sx = 10, sy = 11, sxy = 1 + 4 + 9 + 20, sxx = 30, syy = 1 + 4 + 9 + 25;
  const double oracle = (n * sxy - sx * sy) / std::sqrt((n * sxx - sx * sx) * (n * syy - sy * sy));
  CHECK(pcc(x, y) == doctest::Approx(oracle).epsilon(1e-12));
  CHECK(std::abs(pcc(x, y) - 0.98270) < 1e-5);
  CHECK(pcc(x, x) == doctest::Approx(1.0));
  const std::vector<double> neg{-1, -2, -3, -4};
  CHECK(pcc(x, neg) == doctest::Approx(-1.0));
  const std::vector<double> flat{2, 2, 2, 2};
  CHECK(pcc(x, flat) == 0.0);
  CHECK_THROWS_AS(pcc(x, std::vector<double>{1, 2}), ShapeError);
}

TEST_CASE("compound loss: perfect reconstruction and a unit offset on one patch") {
  const std::size_t rows = 3, P = 200, C = 4;
  auto eeg = testing::random_values(rows * P, 1);
  std::vector<double> fre(rows * (P / 2 + 1), 0.5);
  auto fv = testing::random_values(rows * C, 2);
  const std::vector<double> w(rows, 1.0);

  LossInputs in;
  in.eeg = eeg;
  in.fre = fre;
  in.row_weight = w;
  in.f = nn::Tensor::parameter({rows, C}, fv);
  in.f_hat = nn::Tensor::parameter({rows, C}, fv);
  in.fre_hat = nn::Tensor::parameter({rows, P / 2 + 1}, fre);
  in.eeg_hat = nn::Tensor::parameter({rows, P}, eeg);
  auto perfect = compound_loss(in);
  CHECK(perfect.time == 0.0);
  CHECK(perfect.freq == 0.0);
  CHECK(perfect.commit == 0.0);
  CHECK(perfect.total.item() == 0.0);

  auto shifted = eeg;
  for (std::size_t i = P; i < 2 * P; ++i) shifted[i] += 1.0;
  in.eeg_hat = nn::Tensor::parameter({rows, P}, shifted);
  auto one = compound_loss(in);
  CHECK(one.time == doctest::Approx(200.0).epsilon(1e-12));
  CHECK(one.total.item() == doctest::Approx(200.0).epsilon(1e-12));

  // Mean over batch: the same sums over two windows halve.
  in.batch = 2;
  CHECK(compound_loss(in).time == doctest::Approx(100.0).epsilon(1e-12));
}

TEST_CASE("compound loss: padded rows contribute nothing, terms are non-negative") {
  const std::size_t rows = 4, P = 8, C = 3;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto eeg = testing::random_values(rows * P, seed);
    auto fre = testing::random_values(rows * (P / 2 + 1), seed + 100);
    std::vector<double> w{1, 0, 1, 0};
    LossInputs in;
    in.eeg = eeg;
    in.fre = fre;
    in.row_weight = w;
    in.eeg_hat = nn::Tensor::parameter({rows, P}, testing::random_values(rows * P, seed + 200));
    in.fre_hat = nn::Tensor::parameter({rows, P / 2 + 1}, testing::random_values(rows * (P / 2 + 1), seed + 300));
    in.f = nn::Tensor::parameter({rows, C}, testing::random_values(rows * C, seed + 400));
    in.f_hat = nn::Tensor::parameter({rows, C}, testing::random_values(rows * C, seed + 500));
    in.domain_logits = nn::Tensor::parameter({2, 2}, testing::random_values(4, seed + 600));
    const std::vector<std::size_t> labels{0, 1};
    in.domain_labels = labels;
    in.lambda = 0.5;
    auto l = compound_loss(in);
    CHECK(l.time >= 0.0);
    CHECK(l.freq >= 0.0);
    CHECK(l.commit >= 0.0);
    CHECK(l.domain >= 0.0);
    CHECK(l.total.item() == doctest::Approx(l.time + l.freq + l.commit + 0.5 * l.domain).epsilon(1e-12));

    // Hand sums over the unpadded rows only.
    double t = 0, c = 0;
    auto eh = in.eeg_hat.value();
    auto fv = in.f.value();
    auto fh = in.f_hat.value();
    for (std::size_t r : {0u, 2u}) {
      for (std::size_t i = 0; i < P; ++i) t += std::pow(eh[r * P + i] - eeg[r * P + i], 2);
      for (std::size_t i = 0; i < C; ++i) c += std::pow(fh[r * C + i] - fv[r * C + i], 2);
    }
    CHECK(l.time == doctest::Approx(t).epsilon(1e-12));
    CHECK(l.commit == doctest::Approx(1.25 * c).epsilon(1e-12));

    l.total.backward();
    for (std::size_t r : {1u, 3u}) {
      for (std::size_t i = 0; i < P; ++i) CHECK(in.eeg_hat.grad()[r * P + i] == 0.0);
      for (std::size_t i = 0; i < C; ++i) CHECK(in.f.grad()[r * C + i] == 0.0);
    }
  }
}

TEST_CASE("compound loss rejects shape mismatches") {
  const std::vector<double> eeg(10, 0.0), fre(6, 0.0), w(2, 1.0);
  LossInputs in;
  in.eeg = eeg;
  in.fre = fre;
  in.row_weight = w;
  in.eeg_hat = nn::Tensor::zeros({2, 4});
  in.fre_hat = nn::Tensor::zeros({2, 3});
  in.f = nn::Tensor::zeros({2, 2});
  in.f_hat = nn::Tensor::zeros({2, 2});
  CHECK_THROWS_AS(compound_loss(in), ShapeError);
}

TEST_CASE("all-padded batch gives zero loss and zero gradients") {
  // 150 samples: one window whose five patches all hold padding.
  signalio::EegSegment seg;
  seg.montage_id = "test8";
  seg.rate = 200.0f;
  seg.n_channels = 8;
  seg.n_samples = 150;
  const auto v = testing::random_values(8 * 150, 3);
  seg.data.assign(v.begin(), v.end());
  WindowSet ws;
  ws.append(seg, std::nullopt, signalio::Split::Train, 1024, 200);
  REQUIRE(ws.size() == 1);

  auto cfg = small_config();
  TokenizerModel m(cfg);
  const std::size_t ids[1] = {0};
  auto fw = forward_batch(m, ws, ids, 0.0);
  CHECK(fw.loss.total.item() == 0.0);
  fw.loss.total.backward();
  for (const auto& p : m.parameters()) {
    auto t = p.tensor;
    if (!t.has_grad()) continue;
    for (double g : t.grad()) REQUIRE(g == 0.0);
  }
}

TEST_CASE("model shapes follow the configuration") {
  auto ws = synthetic_windows(1, 0);
  auto cfg = small_config();
  TokenizerModel m(cfg);
  const std::size_t ids[2] = {0, 1};
  auto f = m.encode_features(ws, ids);
  CHECK(f.dim(0) == 2 * 8 * 5);
  CHECK(f.dim(1) == cfg.code_dim);
  auto tokens = m.quantize(f.value(), 2);
  REQUIRE(tokens.size() == 2);
  CHECK(tokens[0].maps.size() == 4);
  tokens[0].validate(m.hierarchy(), cfg.codebook_size);
  auto fh = m.quantized_features(tokens);
  CHECK(fh.shape() == f.shape());
  CHECK(m.decode_time(fh, 2).dim(1) == 200);
  CHECK(m.decode_freq(fh, 2).dim(1) == 101);

  // With identity phi the tracked path equals the plain decode sum.
  for (std::size_t w = 0; w < 2; ++w) {
    auto ref = vq::decode_multiscale(tokens[w], m.hierarchy(), m.codebook(), m.refine());
    for (std::size_t i = 0; i < ref.values.size(); ++i)
      REQUIRE(fh.value()[w * ref.values.size() + i] == doctest::Approx(ref.values[i]).epsilon(1e-12));
  }

  auto bad = cfg;
  bad.patch_len = 201;
  CHECK_THROWS_AS(TokenizerModel{bad}, ConfigError);
}

TEST_CASE("training is deterministic for a fixed seed") {
  auto ws = synthetic_windows(3, 1);
  auto cfg = small_config();
  cfg.steps = 1;
  auto a = train_tokenizer(ws, cfg);
  auto b = train_tokenizer(ws, cfg);
  REQUIRE(a.report.size() == 1);
  CHECK(a.report[0].total == b.report[0].total);
  CHECK(std::isfinite(a.report[0].total));
  cfg.steps = 3;
  auto c = train_tokenizer(ws, cfg);
  auto d = train_tokenizer(ws, cfg);
  for (std::size_t i = 0; i < 3; ++i) CHECK(c.report[i].total == d.report[i].total);
  CHECK(c.final_pcc == d.final_pcc);
  CHECK(c.report.back().pcc_val.has_value());
}

TEST_CASE("frozen identity phi on the finest scale is plain VQ-VAE") {
  auto ws = synthetic_windows(3, 0);
  auto cfg = small_config();
  cfg.scales = {4};
  cfg.freeze_phi = true;
  cfg.steps = 4;
  auto trained = train_tokenizer(ws, cfg);
  const auto& m = trained.model;
  const std::size_t ids[2] = {1, 4};
  auto fw = forward_batch(m, ws, ids, 0.0);

  // Reference: nearest code per (channel, time) row, code vectors as
  // quantized features, straight-through into the decoders.
  const std::size_t C = cfg.code_dim, rows = 2 * 8 * 5, P = 200;
  auto f = m.encode_features(ws, ids);
  std::vector<double> fq(rows * C);
  for (std::size_t w = 0; w < 2; ++w) {
    bth::FeatureMap fm(8, 5, C);
    std::copy(f.value().begin() + static_cast<std::ptrdiff_t>(w * 40 * C),
              f.value().begin() + static_cast<std::ptrdiff_t>((w + 1) * 40 * C), fm.values.begin());
    auto tok = vq::quantize(fm, m.codebook(), 3);
    CHECK(tok == fw.tokens[w].maps[0]);
    auto z = vq::lookup(m.codebook(), tok);
    std::copy(z.values.begin(), z.values.end(), fq.begin() + static_cast<std::ptrdiff_t>(w * 40 * C));
  }
  auto st = nn::add(nn::Tensor::constant({rows, C}, fq), nn::sub(f, nn::detach(f)));
  const auto eh_t = m.decode_time(st, 2);
  const auto fr_t = m.decode_freq(st, 2);
  auto eh = eh_t.value();
  auto fr = fr_t.value();
  double t = 0, q = 0, c = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t w = ids[r / 40], k = r % 40;
    const double* x = ws.patch(w, 0, 0) + k * P;
    for (std::size_t i = 0; i < P; ++i) t += std::pow(eh[r * P + i] - x[i], 2);
    const auto mag = nn::dft_magnitude(std::span<const double>(x, P));
    for (std::size_t i = 0; i < mag.size(); ++i) q += std::pow(fr[r * mag.size() + i] - mag[i], 2);
    for (std::size_t i = 0; i < C; ++i) c += std::pow(fq[r * C + i] - f.value()[r * C + i], 2);
  }
  CHECK(fw.loss.time == doctest::Approx(t / 2).epsilon(1e-10));
  CHECK(fw.loss.freq == doctest::Approx(q / 2).epsilon(1e-10));
  CHECK(fw.loss.commit == doctest::Approx((1.0 + cfg.beta) * c / 2).epsilon(1e-10));
  for (const auto& p : m.parameters()) CHECK(p.name.rfind("phi", 0) != 0);
}

TEST_CASE("zero domain weight leaves the trajectory independent of the domain branch") {
  auto ws = synthetic_windows(3, 1);
  auto base = small_config();
  base.steps = 4;
  auto with = base;
  with.domain_branch = true;
  with.domain_weight = 0.0;
  auto a = train_tokenizer(ws, base);
  auto b = train_tokenizer(ws, with);
  const auto pa = a.model.parameters();
  const auto pb = b.model.parameters();
  CHECK(pb.size() == pa.size() + 2);
  for (const auto& p : pa) {
    auto va = p.tensor.value();
    auto vb = param(pb, p.name).value();
    for (std::size_t i = 0; i < va.size(); ++i) REQUIRE(va[i] == vb[i]);
  }
  for (std::size_t i = 0; i < a.report.size(); ++i) {
    CHECK(a.report[i].time == b.report[i].time);
    CHECK(a.report[i].commit == b.report[i].commit);
    CHECK(b.report[i].lambda == 0.0);
    CHECK(b.report[i].domain > 0.0);
  }
  CHECK(a.model.codebook().vectors == b.model.codebook().vectors);

  // A positive weight does move the encoder.
  auto on = base;
  on.domain_branch = true;
  auto c = train_tokenizer(ws, on);
  CHECK(c.report[1].lambda > 0.0);
  auto ve = param(pa, "enc.out.weight").value();
  const auto pc = c.model.parameters();
  auto vc = param(pc, "enc.out.weight").value();
  bool differs = false;
  for (std::size_t i = 0; i < ve.size(); ++i) differs = differs || ve[i] != vc[i];
  CHECK(differs);
}

TEST_CASE("finite-difference gradients of decoders, refine maps, encoder and domain head") {
  auto ws = synthetic_windows(1, 0);
  auto cfg = small_config();
  cfg.domain_branch = true;
  cfg.scales = {1, 2, 4};
  TokenizerModel m(cfg);
  // Perturb phi away from identity so its gradient is generic.
  for (auto& conv : m.refine().convs) {
    auto noise = testing::random_values(conv.weight.size(), 5, 0.1);
    for (std::size_t i = 0; i < noise.size(); ++i) conv.weight.value()[i] += noise[i];
  }
  const std::size_t ids[1] = {0};
  auto f0 = m.encode_features(ws, ids);
  const std::vector<double> fvals(f0.value().begin(), f0.value().end());
  const auto tokens = m.quantize(fvals, 1);
  std::vector<double> eeg(ws.patches.begin(), ws.patches.begin() + 40 * 200);
  std::vector<double> fre;
  for (std::size_t r = 0; r < 40; ++r) {
    auto mag = nn::dft_magnitude(std::span<const double>(eeg.data() + r * 200, 200));
    fre.insert(fre.end(), mag.begin(), mag.end());
  }
  std::vector<double> w(40, 1.0);
  w[7] = 0.0;
  const auto ps = m.parameters();

  auto decoder_loss = [&]() {
    LossInputs in;
    auto fh = m.quantized_features(tokens);
    in.eeg_hat = m.decode_time(fh, 1);
    in.fre_hat = m.decode_freq(fh, 1);
    in.eeg = eeg;
    in.fre = fre;
    in.f = nn::Tensor::constant({40, cfg.code_dim}, fvals);
    in.f_hat = fh;
    in.row_weight = w;
    // beta multiplies a stop-gradient term that finite differences would see.
    in.beta = 0.0;
    return compound_loss(in).total;
  };
  for (const char* prefix : {"phi", "dec_time.", "dec_freq."}) {
    auto r = nn::grad_check(decoder_loss, params_with_prefix(ps, prefix), 1e-4, 6);
    INFO(std::string(prefix));
    CHECK(r.checked > 0);
    CHECK(r.max_rel_error < 1e-4);
  }

  // Encoder through the commitment pull towards fixed codes.
  const auto fq = m.quantized_features(tokens);
  const std::vector<double> fq_vals(fq.value().begin(), fq.value().end());
  auto encoder_loss = [&]() { return nn::weighted_sq_error(m.encode_features(ws, ids), fq_vals, w); };
  auto re = nn::grad_check(encoder_loss, params_with_prefix(ps, "enc."), 1e-5, 4);
  CHECK(re.max_rel_error < 1e-4);

  auto domain_loss = [&]() {
    auto rows = nn::concat_rows({nn::Tensor::constant({40, cfg.code_dim}, fvals),
                                 m.text_features(std::vector<std::size_t>{3, 50, 90})});
    std::vector<std::size_t> labels(43, 0);
    labels[40] = labels[41] = labels[42] = 1;
    std::vector<double> cw(43, 1.0 / 43);
    return nn::cross_entropy(m.domain_logits(rows), labels, cw, 0, 2);
  };
  auto rd = nn::grad_check(domain_loss, params_with_prefix(ps, "domain."), 1e-5, 8);
  CHECK(rd.checked > 0);
  CHECK(rd.max_rel_error < 1e-4);
}

TEST_CASE("non-finite input aborts training with a diagnostic") {
  auto ws = synthetic_windows(2, 0);
  ws.patches[123] = std::nan("");
  auto cfg = small_config();
  try {
    train_tokenizer(ws, cfg);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("non-finite") != std::string::npos);
  }
}

TEST_CASE("save and load reproduce tokens and reconstructions") {
  auto dir = testing::scratch_dir("tokenizer_io");
  auto ws = synthetic_windows(3, 1);
  auto cfg = small_config();
  cfg.steps = 2;
  auto r = train_tokenizer(ws, cfg);
  r.model.save(dir.string());
  auto back = TokenizerModel::load(dir.string());
  CHECK(back.tokenize(ws, 6) == r.model.tokenize(ws, 6));
  CHECK(back.reconstruct(ws, 6) == r.model.reconstruct(ws, 6));
  CHECK_THROWS_WITH_AS(TokenizerModel::load((dir / "nope").string()), doctest::Contains("missing upstream artifact"),
                       Error);
}

TEST_CASE("training report CSV carries the reduction header and fixed columns") {
  auto dir = testing::scratch_dir("tokenizer_report");
  std::vector<ReportRow> rows{{0, 1.5, 1.0, 0.25, 0.25, 0.0, 0.0, std::nullopt}, {1, 1.0, 0.5, 0.25, 0.25, 0.0, 0.1, 0.5}};
  const auto path = (dir / "report.csv").string();
  write_report(path, rows);
  std::ifstream in(path);
  std::string l1, l2, l3, l4;
  std::getline(in, l1);
  std::getline(in, l2);
  std::getline(in, l3);
  std::getline(in, l4);
  CHECK(l1.rfind("# reduction: sum over elements, mean over batch", 0) == 0);
  CHECK(l2 == "step,loss_total,loss_time,loss_freq,loss_commit,loss_domain,lambda,pcc_val");
  CHECK(l3 == "0,1.5,1,0.25,0.25,0,0,");
  CHECK(l4 == "1,1,0.5,0.25,0.25,0,0.1,0.5");
}

TEST_CASE("tokenizer config JSON round trip and unknown keys") {
  TokenizerConfig c;
  c.scales = {1, 3};
  c.codebook_size = 32;
  c.encoder.layers = 3;
  c.optim.peak_lr = 2e-3;
  TokenizerConfig back;
  from_json_into_struct(to_json_value(c), back);
  CHECK(to_json_value(back) == to_json_value(c));
  TokenizerConfig d;
  CHECK_THROWS_WITH_AS(from_json_into_struct(Json{{"codebok_size", 3}}, d), doctest::Contains("unknown config key"),
                       ConfigError);
  CHECK_THROWS_AS(from_json_into_struct(Json{{"optim", {{"lr", 1}}}}, d), ConfigError);
  CHECK_THROWS_AS(from_json_into_struct(Json{{"steps", "many"}}, d), ConfigError);
}
