// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "thdbar/bar.hpp"
#include "thdbar/config_json.hpp"

namespace thdbar::instruct {

struct Option {
  std::string letter;  // "A"; empty for bare answers such as "Yes"
  std::string text;
};

struct PromptTemplate {
  std::string task_id;
  std::string question;
  std::vector<Option> options;

  // Throws unless letters are unique, there are at least two options and
  // the rendered answers are distinct.
  void validate() const;
  // "Question: <q> Options: (A) x, (B) y. Answer: " (no Options part when
  // every option is bare).
  std::string prompt_text() const;
  // "(A)" for lettered options, the option text otherwise.
  std::string answer_text(std::size_t label) const;
};

// Lines `task_id<TAB>question<TAB>opt|opt|...`; `#` starts a comment line.
std::vector<PromptTemplate> parse_templates(const std::string& text);
// The shipped registry.
std::vector<PromptTemplate> builtin_templates();
// "builtin" or a path to a registry file.
std::vector<PromptTemplate> load_templates(const std::string& source);
const PromptTemplate& find_template(const std::vector<PromptTemplate>& all, const std::string& task_id);

/// Layout [EEG blocks][SEP][prompt][answer][END]. `text` starts at SEP;
/// `loss_mask` runs over `text` and is set on the answer and END only.
struct InstructionSample {
  std::string task_id;
  vq::MultiScaleTokens eeg;
  std::vector<std::size_t> text;
  std::vector<std::uint8_t> loss_mask;
  std::size_t answer_begin = 0;  // index into `text`
  std::size_t answer_len = 0;
  std::size_t label = 0;
};

InstructionSample render_sample(const vq::MultiScaleTokens& eeg, const PromptTemplate& tpl, int label,
                                const bar::VocabLayout& vocab);
// One sample per labelled sequence of `split` in the corpus.
std::vector<InstructionSample> corpus_samples(const vq::TokenCorpus& corpus, std::uint8_t split,
                                              const PromptTemplate& tpl, const bar::VocabLayout& vocab);

// Text row j reads token j-1 (START for j = 0) and predicts token j.
// Sequences are padded to the longest text with invalid PAD rows.
bar::SequenceBatch build_batch(const bar::BarModel& m, const std::vector<const InstructionSample*>& samples);

struct FinetuneConfig {
  std::size_t steps = 1000;
  std::size_t batch = 8;
  std::size_t log_every = 50;
  nn::AdamWConfig optim{5e-4, 5e-5, 0.9, 0.95, 1e-8, 0.1, 0.1, 1.0};
  std::uint64_t seed = 0;

  void validate() const;
};
Json to_json_value(const FinetuneConfig& c);
void from_json_into_struct(const Json& j, FinetuneConfig& c);

struct FinetuneRow {
  std::size_t step = 0;
  double loss = 0.0;
};

// Cross-entropy over the loss-masked rows only, softmax over the whole
// vocabulary. Updates `model` in place.
std::vector<FinetuneRow> finetune(bar::BarModel& model, const std::vector<InstructionSample>& samples,
                                  const FinetuneConfig& cfg,
                                  const std::function<void(const FinetuneRow&)>& on_row = {});

struct EvalResult {
  std::size_t classes = 0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::vector<std::size_t> predictions;
  std::vector<std::string> decoded;  // answer strings as emitted
  double balanced_accuracy = 0.0;

  std::vector<double> recall() const;
};

// Mean recall over the classes that occur in the truth.
double balanced_accuracy(const std::vector<std::vector<std::size_t>>& confusion);

// Greedy decoding of the answer span restricted to the template's answer
// strings (followed by END).
EvalResult evaluate(const bar::BarModel& model, const std::vector<InstructionSample>& samples,
                    const PromptTemplate& tpl, std::size_t chunk = 32);
// "class,answer,support,correct,recall" rows after a balanced-accuracy
// comment line.
void write_eval_report(const std::string& path, const EvalResult& r, const PromptTemplate& tpl);
void write_finetune_report(const std::string& path, const std::vector<FinetuneRow>& rows);

}  // namespace thdbar::instruct
