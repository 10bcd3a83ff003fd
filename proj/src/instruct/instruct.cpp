// SPDX-License-Identifier: Apache-2.0
#include "thdbar/instruct.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "../builtin_data.hpp"
#include "thdbar/error.hpp"
#include "thdbar/parallel.hpp"

namespace thdbar::instruct {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

Option parse_option(const std::string& raw) {
  const auto s = trim(raw);
  if (s.size() >= 3 && s[0] == '(') {
    const auto close = s.find(')');
    if (close != std::string::npos && close > 1) return {s.substr(1, close - 1), trim(s.substr(close + 1))};
  }
  return {"", s};
}

}  // namespace

void PromptTemplate::validate() const {
  if (task_id.empty()) throw FormatError("template without task id");
  if (options.size() < 2) throw FormatError("template " + task_id + " needs at least two options");
  const bool lettered = !options[0].letter.empty();
  std::set<std::string> letters, answers;
  for (std::size_t i = 0; i < options.size(); ++i) {
    if (options[i].letter.empty() == lettered)
      throw FormatError("template " + task_id + " mixes lettered and bare options");
    if (!lettered && options[i].text.empty()) throw FormatError("template " + task_id + " has an empty option");
    if (lettered && !letters.insert(options[i].letter).second)
      throw FormatError("template " + task_id + " repeats option letter " + options[i].letter);
    if (!answers.insert(answer_text(i)).second) throw FormatError("template " + task_id + " repeats an answer");
  }
}

std::string PromptTemplate::prompt_text() const {
  std::string s = "Question: " + question + " ";
  if (!options.empty() && !options[0].letter.empty()) {
    s += "Options: ";
    for (std::size_t i = 0; i < options.size(); ++i) {
      if (i) s += ", ";
      s += "(" + options[i].letter + ") " + options[i].text;
    }
    s += ". ";
  }
  return s + "Answer: ";
}

std::string PromptTemplate::answer_text(std::size_t label) const {
  if (label >= options.size()) throw Error("unknown label " + std::to_string(label) + " for task " + task_id);
  const auto& o = options[label];
  return o.letter.empty() ? o.text : "(" + o.letter + ")";
}

std::vector<PromptTemplate> parse_templates(const std::string& text) {
  std::vector<PromptTemplate> out;
  std::set<std::string> ids, prompts;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty() || trim(line)[0] == '#') continue;
    std::vector<std::string> cols;
    std::size_t start = 0;
    for (std::size_t tab; (tab = line.find('\t', start)) != std::string::npos; start = tab + 1)
      cols.push_back(line.substr(start, tab - start));
    cols.push_back(line.substr(start));
    if (cols.size() != 3) throw FormatError("template line " + std::to_string(lineno) + ": expected 3 tab-separated fields");
    PromptTemplate t;
    t.task_id = trim(cols[0]);
    t.question = trim(cols[1]);
    std::size_t b = 0;
    for (std::size_t bar; (bar = cols[2].find('|', b)) != std::string::npos; b = bar + 1)
      t.options.push_back(parse_option(cols[2].substr(b, bar - b)));
    t.options.push_back(parse_option(cols[2].substr(b)));
    t.validate();
    if (!ids.insert(t.task_id).second) throw FormatError("duplicate template task id: " + t.task_id);
    // Rendering must identify the task: no two tasks may share a prompt.
    if (!prompts.insert(t.prompt_text()).second) throw FormatError("template " + t.task_id + " repeats another task's prompt");
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<PromptTemplate> builtin_templates() {
  const auto text = detail::builtin_text("templates");
  if (!text) throw Error("built-in template registry is missing");
  return parse_templates(*text);
}

std::vector<PromptTemplate> load_templates(const std::string& source) {
  if (source.empty() || source == "builtin") return builtin_templates();
  std::ifstream in(source);
  if (!in) throw Error("missing upstream artifact: " + source);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_templates(ss.str());
}

const PromptTemplate& find_template(const std::vector<PromptTemplate>& all, const std::string& task_id) {
  for (const auto& t : all)
    if (t.task_id == task_id) return t;
  throw ConfigError("unknown task id: " + task_id);
}

InstructionSample render_sample(const vq::MultiScaleTokens& eeg, const PromptTemplate& tpl, int label,
                                const bar::VocabLayout& vocab) {
  if (label < 0 || static_cast<std::size_t>(label) >= tpl.options.size())
    throw Error("unknown label " + std::to_string(label) + " for task " + tpl.task_id);
  InstructionSample s;
  s.task_id = tpl.task_id;
  s.eeg = eeg;
  s.label = static_cast<std::size_t>(label);
  s.text.push_back(vocab.sep());
  for (auto id : vocab.encode(tpl.prompt_text())) s.text.push_back(id);
  s.answer_begin = s.text.size();
  for (auto id : vocab.encode(tpl.answer_text(s.label))) s.text.push_back(id);
  s.answer_len = s.text.size() - s.answer_begin;
  s.text.push_back(vocab.end());
  s.loss_mask.assign(s.text.size(), 0);
  std::fill(s.loss_mask.begin() + static_cast<std::ptrdiff_t>(s.answer_begin), s.loss_mask.end(), 1);
  return s;
}

std::vector<InstructionSample> corpus_samples(const vq::TokenCorpus& corpus, std::uint8_t split,
                                              const PromptTemplate& tpl, const bar::VocabLayout& vocab) {
  std::vector<InstructionSample> out;
  for (std::size_t i = 0; i < corpus.sequences.size(); ++i)
    if (corpus.split[i] == split && corpus.labels[i]) out.push_back(render_sample(corpus.sequences[i], tpl, *corpus.labels[i], vocab));
  return out;
}

bar::SequenceBatch build_batch(const bar::BarModel& m, const std::vector<const InstructionSample*>& samples) {
  if (samples.empty()) throw Error("empty sample set");
  std::size_t text_len = 0;
  for (const auto* s : samples) {
    if (s->loss_mask.size() != s->text.size()) throw ShapeError("dimension mismatch between text and loss mask");
    text_len = std::max(text_len, s->text.size());
  }
  const auto& vocab = m.vocab();
  bar::SequenceBatch b;
  b.batch = samples.size();
  b.length = m.eeg_length() + text_len;
  for (const auto* s : samples) {
    const std::size_t first = b.rows();
    m.append_eeg(s->eeg, b);
    std::fill(b.weight.begin() + static_cast<std::ptrdiff_t>(first), b.weight.end(), 0.0);
    for (std::size_t j = 0; j < text_len; ++j) {
      const std::vector<std::size_t> pos{m.text_position_row(j)};
      if (j < s->text.size())
        b.push(j == 0 ? vocab.start() : s->text[j - 1], pos, s->text[j], s->loss_mask[j] ? 1.0 : 0.0);
      else
        b.push(vocab.pad(), pos, vocab.pad(), 0.0, false);
    }
  }
  b.mask = m.mask(text_len);
  return b;
}

void FinetuneConfig::validate() const {
  if (steps == 0) throw ConfigError("finetune steps must be >= 1");
  if (batch == 0) throw ConfigError("finetune batch must be >= 1");
  if (log_every == 0) throw ConfigError("log_every must be >= 1");
}

Json to_json_value(const FinetuneConfig& c) {
  return Json{{"steps", c.steps},
              {"batch", c.batch},
              {"log_every", c.log_every},
              {"optim", nn::to_json_value(c.optim)},
              {"seed", c.seed}};
}

void from_json_into_struct(const Json& j, FinetuneConfig& c) {
  reject_unknown_keys(j, {"steps", "batch", "log_every", "optim", "seed"}, "finetune");
  read_key(j, "steps", c.steps);
  read_key(j, "batch", c.batch);
  read_key(j, "log_every", c.log_every);
  read_key(j, "optim", c.optim);
  read_key(j, "seed", c.seed);
}

std::vector<FinetuneRow> finetune(bar::BarModel& model, const std::vector<InstructionSample>& samples,
                                  const FinetuneConfig& cfg, const std::function<void(const FinetuneRow&)>& on_row) {
  cfg.validate();
  if (samples.empty()) throw Error("empty sample set");
  const std::size_t vocab = model.vocab().size();
  nn::AdamW opt(model.parameters(), cfg.optim);
  std::mt19937_64 rng(cfg.seed ^ 0x696e737472756374ULL);
  std::uniform_int_distribution<std::size_t> pick(0, samples.size() - 1);
  std::vector<FinetuneRow> rows;
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    std::vector<const InstructionSample*> batch;
    for (std::size_t i = 0; i < cfg.batch; ++i) batch.push_back(&samples[pick(rng)]);
    auto out = bar::nstp_forward(model, build_batch(model, batch), 0, vocab);
    const double loss = out.loss.item();
    if (!std::isfinite(loss)) throw Error("fine-tuning diverged at step " + std::to_string(step) + ": non-finite loss");
    opt.zero_grad();
    out.loss.backward();
    opt.step(nn::cosine_lr(cfg.optim, step - 1, cfg.steps));
    if (step % cfg.log_every == 0 || step == cfg.steps || step == 1) {
      rows.push_back({step, loss});
      if (on_row) on_row(rows.back());
    }
  }
  return rows;
}

std::vector<double> EvalResult::recall() const {
  std::vector<double> r(classes, 0.0);
  for (std::size_t c = 0; c < classes; ++c) {
    std::size_t support = 0;
    for (auto v : confusion[c]) support += v;
    r[c] = support ? static_cast<double>(confusion[c][c]) / static_cast<double>(support) : 0.0;
  }
  return r;
}

double balanced_accuracy(const std::vector<std::vector<std::size_t>>& confusion) {
  double sum = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < confusion.size(); ++c) {
    if (confusion[c].size() != confusion.size()) throw ShapeError("dimension mismatch: confusion matrix must be square");
    std::size_t support = 0;
    for (auto v : confusion[c]) support += v;
    if (support == 0) continue;
    sum += static_cast<double>(confusion[c][c]) / static_cast<double>(support);
    ++present;
  }
  return present ? sum / static_cast<double>(present) : 0.0;
}

EvalResult evaluate(const bar::BarModel& model, const std::vector<InstructionSample>& samples,
                    const PromptTemplate& tpl, std::size_t chunk) {
  tpl.validate();
  const auto& vocab = model.vocab();
  const std::size_t K = tpl.options.size();
  std::vector<std::vector<std::size_t>> answers;
  std::size_t longest = 0;
  for (std::size_t k = 0; k < K; ++k) {
    answers.push_back(vocab.encode(tpl.answer_text(k)));
    longest = std::max(longest, answers.back().size());
  }
  if (chunk == 0) chunk = 1;

  EvalResult res;
  res.classes = K;
  res.confusion.assign(K, std::vector<std::size_t>(K, 0));
  res.predictions.assign(samples.size(), 0);
  res.decoded.assign(samples.size(), "");
  const std::size_t parts = (samples.size() + chunk - 1) / chunk;
  parallel_for(parts, [&](std::size_t c) {
    const std::size_t lo = c * chunk, hi = std::min(samples.size(), lo + chunk);
    std::vector<std::vector<std::size_t>> partial(hi - lo);
    std::vector<bool> done(hi - lo, false);
    for (std::size_t step = 0; step <= longest; ++step) {
      // Prompt plus the answer so far; the next row's target is a dummy.
      std::vector<InstructionSample> probe;
      for (std::size_t i = lo; i < hi; ++i) {
        InstructionSample s = samples[i];
        s.text.resize(s.answer_begin);
        for (auto id : partial[i - lo]) s.text.push_back(id);
        s.text.push_back(vocab.end());
        s.loss_mask.assign(s.text.size(), 0);
        probe.push_back(std::move(s));
      }
      std::vector<const InstructionSample*> ptrs;
      for (auto& s : probe) ptrs.push_back(&s);
      const auto batch = build_batch(model, ptrs);
      const auto logits = model.logits(batch);
      const std::size_t v = logits.dim(1);
      const auto z = logits.value();
      bool any = false;
      for (std::size_t i = lo; i < hi; ++i) {
        if (done[i - lo]) continue;
        auto& cur = partial[i - lo];
        std::vector<std::size_t> allowed;
        for (const auto& a : answers) {
          if (!std::equal(cur.begin(), cur.end(), a.begin(), a.begin() + static_cast<std::ptrdiff_t>(std::min(cur.size(), a.size()))) ||
              cur.size() > a.size())
            continue;
          allowed.push_back(cur.size() < a.size() ? a[cur.size()] : vocab.end());
        }
        const std::size_t row = (i - lo) * batch.length + model.eeg_length() + samples[i].answer_begin + cur.size();
        std::size_t best = allowed.at(0);
        for (auto id : allowed)
          if (z[row * v + id] > z[row * v + best] || (z[row * v + id] == z[row * v + best] && id < best)) best = id;
        if (best == vocab.end()) {
          done[i - lo] = true;
        } else {
          cur.push_back(best);
          any = true;
        }
      }
      if (!any) break;
    }
    for (std::size_t i = lo; i < hi; ++i) {
      const auto& cur = partial[i - lo];
      std::size_t pred = K;
      for (std::size_t k = 0; k < K; ++k)
        if (answers[k] == cur) pred = k;
      if (pred == K) throw Error("constrained decoding produced an invalid answer");
      res.predictions[i] = pred;
      res.decoded[i] = vocab.decode(cur);
    }
  });
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].label >= K) throw Error("unknown label " + std::to_string(samples[i].label));
    ++res.confusion[samples[i].label][res.predictions[i]];
  }
  res.balanced_accuracy = balanced_accuracy(res.confusion);
  return res;
}

void write_eval_report(const std::string& path, const EvalResult& r, const PromptTemplate& tpl) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", r.balanced_accuracy);
  out << "# task " << tpl.task_id << "; balanced_accuracy " << buf << "\n";
  out << "class,answer,support,correct,recall\n";
  const auto rec = r.recall();
  for (std::size_t c = 0; c < r.classes; ++c) {
    std::size_t support = 0;
    for (auto v : r.confusion[c]) support += v;
    std::snprintf(buf, sizeof buf, "%.9g", rec[c]);
    out << c << "," << tpl.answer_text(c) << "," << support << "," << r.confusion[c][c] << "," << buf << "\n";
  }
}

void write_finetune_report(const std::string& path, const std::vector<FinetuneRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path);
  out << "# loss: mean cross-entropy over answer and END positions\n";
  out << "step,loss\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.9g", r.loss);
    out << r.step << "," << buf << "\n";
  }
}

}  // namespace thdbar::instruct
