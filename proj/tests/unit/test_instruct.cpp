// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <fstream>
#include <random>
#include <set>

#include "test_util.hpp"
#include "thdbar/error.hpp"
#include "thdbar/instruct.hpp"
#include "thdbar/parallel.hpp"

using namespace thdbar;
using namespace thdbar::instruct;

namespace {

bar::BarConfig tiny_config() {
  bar::BarConfig c;
  c.scheme = "tiny2-2";
  c.V = 4;
  c.time_steps = 2;
  c.max_text = 128;
  c.model = {2, 32, 64, 2};
  return c;
}

vq::MultiScaleTokens tokens_with(const bar::BarModel& m, vq::Token first, std::mt19937_64& rng) {
  vq::MultiScaleTokens R;
  R.steps = m.config().time_steps;
  std::uniform_int_distribution<vq::Token> tok(0, static_cast<vq::Token>(m.config().V - 1));
  for (auto s : m.subset().scales) {
    R.maps.emplace_back(s, m.hierarchy().groups(s), R.steps);
    for (auto& v : R.maps.back().tokens) v = tok(rng);
  }
  R.maps[0].at(0, 0) = first;
  return R;
}

}  // namespace

TEST_CASE("template registry") {
  const auto all = builtin_templates();
  CHECK(all.size() == 10);
  const auto& seed = find_template(all, "seed");
  CHECK(seed.prompt_text() ==
        "Question: Which emotion type does this EEG segment belong to? Options: (A) Positive, (B) Neutral, (C) "
        "Negative. Answer: ");
  CHECK(seed.answer_text(2) == "(C)");
  const auto& tuab = find_template(all, "tuab");
  CHECK(tuab.prompt_text() == "Question: Is this EEG segment abnormal? Answer: ");
  CHECK(tuab.answer_text(0) == "Yes");
  CHECK(find_template(all, "region3").options.size() == 3);
  CHECK_THROWS_AS(find_template(all, "nope"), ConfigError);
  CHECK_THROWS_AS(seed.answer_text(3), Error);

  CHECK_THROWS_AS(parse_templates("t\tq\t(A) x|(A) y\n"), FormatError);
  CHECK_THROWS_AS(parse_templates("t\tq\t(A) x\n"), FormatError);
  CHECK_THROWS_AS(parse_templates("t\tq\t(A) x|y\n"), FormatError);
  CHECK_THROWS_AS(parse_templates("t\tq\n"), FormatError);
  CHECK_THROWS_AS(parse_templates("t\tq\tx|y\nt\tq\tx|y\n"), FormatError);
  CHECK_THROWS_AS(parse_templates("t\tq\tx|y\nu\tq\tx|y\n"), FormatError);
  CHECK(parse_templates("# c\n\nt\tq\t(A) x|(B) y\n").size() == 1);

  auto dir = testing::scratch_dir("instruct_templates");
  {
    std::ofstream(dir / "t.tsv") << "bin\tIs it?\t(A) No|(B) Yes\n";
  }
  CHECK(load_templates((dir / "t.tsv").string())[0].task_id == "bin");
  CHECK_THROWS_WITH_AS(load_templates((dir / "none.tsv").string()), doctest::Contains("missing upstream artifact"),
                       Error);
}

TEST_CASE("rendered layout and loss mask") {
  bar::BarModel m(tiny_config());
  const auto& vocab = m.vocab();
  std::mt19937_64 rng(1);
  const auto R = tokens_with(m, 1, rng);
  const auto registry = builtin_templates();
  const auto& tpl = find_template(registry, "motor");
  const auto s = render_sample(R, tpl, 0, vocab);
  CHECK(s.text.front() == vocab.sep());
  CHECK(s.text.back() == vocab.end());
  CHECK(s.answer_len == 3);
  std::vector<std::size_t> answer(s.text.begin() + static_cast<std::ptrdiff_t>(s.answer_begin),
                                  s.text.begin() + static_cast<std::ptrdiff_t>(s.answer_begin + s.answer_len));
  CHECK(vocab.decode(answer) == "(A)");
  std::vector<std::size_t> prompt(s.text.begin() + 1, s.text.begin() + static_cast<std::ptrdiff_t>(s.answer_begin));
  CHECK(vocab.decode(prompt) == tpl.prompt_text());
  for (std::size_t j = 0; j < s.text.size(); ++j) CHECK(s.loss_mask[j] == (j >= s.answer_begin ? 1 : 0));
  CHECK(s.eeg == R);

  const auto again = render_sample(R, tpl, 0, vocab);
  CHECK(again.text == s.text);
  CHECK(again.loss_mask == s.loss_mask);
  CHECK_THROWS_AS(render_sample(R, tpl, 2, vocab), Error);
  CHECK_THROWS_AS(render_sample(R, tpl, -1, vocab), Error);

  // Injective over (task, label).
  std::set<std::vector<std::size_t>> seen;
  std::size_t n = 0;
  for (const auto& t : builtin_templates())
    for (std::size_t k = 0; k < t.options.size(); ++k, ++n) seen.insert(render_sample(R, t, static_cast<int>(k), vocab).text);
  CHECK(seen.size() == n);
}

TEST_CASE("batch rows shift the text and carry loss only on the answer") {
  bar::BarModel m(tiny_config());
  const auto& vocab = m.vocab();
  std::mt19937_64 rng(2);
  const auto registry = builtin_templates();
  const auto& tuab = find_template(registry, "tuab");
  const auto a = render_sample(tokens_with(m, 0, rng), tuab, 0, vocab);  // "Yes"
  const auto b = render_sample(tokens_with(m, 1, rng), tuab, 1, vocab);  // "No"
  const auto batch = build_batch(m, {&a, &b});
  const std::size_t E = m.eeg_length();
  CHECK(batch.length == E + a.text.size());
  for (std::size_t i = 0; i < E; ++i) CHECK(batch.weight[i] == 0.0);
  CHECK(batch.inputs.index[batch.inputs.offsets[E]] == vocab.start());
  for (std::size_t j = 1; j < a.text.size(); ++j) {
    CHECK(batch.inputs.index[batch.inputs.offsets[E + j]] == a.text[j - 1]);
    CHECK(batch.targets[E + j] == a.text[j]);
    CHECK(batch.weight[E + j] == static_cast<double>(a.loss_mask[j]));
  }
  // The shorter answer is padded with invalid rows.
  const std::size_t row = batch.length + E + b.text.size();
  CHECK(batch.key_valid[row] == 0);
  CHECK(batch.weight[row] == 0.0);
  CHECK(batch.mask(E, E - 1));
  CHECK(!batch.mask(E - 1, E));
  CHECK(!batch.mask(E + 1, E + 2));

  auto short_text = m.config();
  short_text.max_text = 8;
  CHECK_THROWS_AS(build_batch(bar::BarModel(short_text), {&a}), ShapeError);
}

TEST_CASE("answer-only loss and gradients") {
  bar::BarModel m(tiny_config());
  const auto& vocab = m.vocab();
  std::mt19937_64 rng(3);
  const auto registry = builtin_templates();
  const auto& tpl = find_template(registry, "region3");
  const auto s = render_sample(tokens_with(m, 2, rng), tpl, 1, vocab);
  const auto batch = build_batch(m, {&s});

  auto out = bar::nstp_forward(m, batch, 0, vocab.size());
  // Hand-composed: mean over the masked rows of -log softmax.
  const auto z = out.logits.value();
  const std::size_t v = out.logits.dim(1), E = m.eeg_length();
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t j = 0; j < s.text.size(); ++j) {
    if (!s.loss_mask[j]) continue;
    const double* row = z.data() + (E + j) * v;
    double mx = row[0];
    for (std::size_t c = 1; c < v; ++c) mx = std::max(mx, row[c]);
    double se = 0.0;
    for (std::size_t c = 0; c < v; ++c) se += std::exp(row[c] - mx);
    sum += mx + std::log(se) - row[s.text[j]];
    ++count;
  }
  CHECK(count == 4);
  CHECK(out.loss.item() == doctest::Approx(sum / 4.0).epsilon(1e-12));

  out.loss.backward();
  const auto g = out.logits.grad();
  for (std::size_t r = 0; r < batch.rows(); ++r) {
    const bool answer = r >= E && s.loss_mask[r - E];
    double mag = 0.0;
    for (std::size_t c = 0; c < v; ++c) mag += std::abs(g[r * v + c]);
    if (answer)
      CHECK(mag > 0.0);
    else
      REQUIRE(mag == 0.0);
  }

  // Finite differences on prompt-row logits change nothing.
  std::vector<double> w(batch.rows(), 0.0);
  for (std::size_t r = 0; r < batch.rows(); ++r) w[r] = batch.weight[r] / 4.0;
  std::vector<double> base(z.begin(), z.end());
  auto loss_at = [&](const std::vector<double>& vals) {
    auto t = nn::Tensor::constant(out.logits.shape(), vals);
    return nn::cross_entropy(t, batch.targets, w, 0, v).item();
  };
  const double l0 = loss_at(base);
  for (std::size_t j = 1; j < s.answer_begin; j += 7) {
    auto p = base;
    p[(E + j) * v + s.text[j]] += 1e-3;
    p[(E + j) * v + 3] -= 1e-3;
    CHECK(loss_at(p) == l0);
  }

  // All-false mask: zero loss, zero gradients.
  auto silent = s;
  std::fill(silent.loss_mask.begin(), silent.loss_mask.end(), 0);
  auto zero = bar::nstp_forward(m, build_batch(m, {&silent}), 0, vocab.size());
  CHECK(zero.loss.item() == 0.0);
  for (auto& p : m.parameters()) p.tensor.zero_grad();
  zero.loss.backward();
  for (auto& p : m.parameters())
    for (double x : p.tensor.grad()) REQUIRE(x == 0.0);
}

TEST_CASE("balanced accuracy") {
  CHECK(balanced_accuracy({{2, 0}, {1, 1}}) == doctest::Approx(0.75));
  CHECK(balanced_accuracy({{3, 0, 0}, {0, 3, 0}, {0, 0, 3}}) == 1.0);
  CHECK(balanced_accuracy({{3, 0, 0}, {3, 0, 0}, {3, 0, 0}}) == doctest::Approx(1.0 / 3.0));
  CHECK(balanced_accuracy({{1, 0}, {0, 0}}) == 1.0);  // absent classes are skipped
  CHECK_THROWS_AS(balanced_accuracy({{1, 0}, {0}}), ShapeError);
}

TEST_CASE("fine-tuning learns a planted rule and decoding stays on the options") {
  bar::BarModel m(tiny_config());
  const auto& vocab = m.vocab();
  const auto registry = builtin_templates();
  const auto& tpl = find_template(registry, "region3");
  std::mt19937_64 rng(4);
  std::vector<InstructionSample> train, test;
  for (int i = 0; i < 96; ++i) {
    const int label = i % 3;
    (i < 72 ? train : test).push_back(render_sample(tokens_with(m, static_cast<vq::Token>(label), rng), tpl, label, vocab));
  }
  // Untrained: every decoded answer is still one of the options.
  auto before = evaluate(m, test, tpl);
  for (const auto& d : before.decoded) CHECK((d == "(A)" || d == "(B)" || d == "(C)"));

  FinetuneConfig cfg;
  cfg.steps = 150;
  cfg.log_every = 50;
  cfg.optim.peak_lr = 3e-3;
  cfg.optim.min_lr = 3e-4;
  const auto rows = finetune(m, train, cfg);
  CHECK(rows.front().step == 1);
  CHECK(rows.back().step == 150);
  CHECK(rows.back().loss < rows.front().loss);
  set_threads(2);
  const auto after = evaluate(m, test, tpl, 5);
  set_threads(1);
  CHECK(after.balanced_accuracy >= 0.9);
  CHECK(evaluate(m, test, tpl).predictions == after.predictions);
  std::size_t total = 0;
  for (const auto& r : after.confusion)
    for (auto v : r) total += v;
  CHECK(total == test.size());

  auto dir = testing::scratch_dir("instruct_eval");
  write_eval_report((dir / "eval.csv").string(), after, tpl);
  std::ifstream in(dir / "eval.csv");
  std::string l1, l2, l3;
  std::getline(in, l1);
  std::getline(in, l2);
  std::getline(in, l3);
  CHECK(l1.rfind("# task region3; balanced_accuracy ", 0) == 0);
  CHECK(l2 == "class,answer,support,correct,recall");
  CHECK(l3.rfind("0,(A),8,", 0) == 0);
  write_finetune_report((dir / "ft.csv").string(), rows);

  CHECK_THROWS_AS(finetune(m, {}, cfg), Error);
}

TEST_CASE("fine-tune config json") {
  FinetuneConfig c;
  c.steps = 17;
  FinetuneConfig back;
  from_json_into_struct(to_json_value(c), back);
  CHECK(to_json_value(back) == to_json_value(c));
  CHECK_THROWS_AS(from_json_into_struct(Json{{"stpes", 3}}, back), ConfigError);
  c.batch = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("every registry template fits the default text budget") {
  const bar::BarModel m{bar::BarConfig{}};
  std::mt19937_64 rng(12);
  const auto eeg = tokens_with(m, 0, rng);
  for (const auto& tpl : builtin_templates())
    for (std::size_t label = 0; label < tpl.options.size(); ++label) {
      const auto s = render_sample(eeg, tpl, static_cast<int>(label), m.vocab());
      INFO(tpl.task_id);
      CHECK(s.text.size() <= m.config().max_text);
      CHECK_NOTHROW(build_batch(m, {&s}));
    }
}
