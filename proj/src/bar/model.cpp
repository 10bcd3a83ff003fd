// SPDX-License-Identifier: Apache-2.0
#include <filesystem>
#include <fstream>

#include "thdbar/bar.hpp"
#include "thdbar/error.hpp"

namespace thdbar::bar {

std::size_t VocabLayout::char_token(char c) const {
  const int code = static_cast<unsigned char>(c);
  if (code < 32 || code > 126) throw Error("character outside the text vocabulary: code " + std::to_string(code));
  return eeg + static_cast<std::size_t>(code - 32);
}

char VocabLayout::token_char(std::size_t id) const {
  if (!is_text(id)) throw Error("token " + std::to_string(id) + " is not a text token");
  return static_cast<char>(32 + (id - eeg));
}

std::vector<std::size_t> VocabLayout::encode(const std::string& text) const {
  std::vector<std::size_t> out;
  out.reserve(text.size());
  for (char c : text) out.push_back(char_token(c));
  return out;
}

std::string VocabLayout::decode(const std::vector<std::size_t>& ids) const {
  std::string s;
  for (auto id : ids) s += token_char(id);
  return s;
}

nn::TransformerSpec preset_spec(const std::string& name) {
  if (name == "tiny") return {2, 64, 128, 4};
  if (name == "base") return {12, 768, 3072, 12};
  if (name == "large") return {24, 1024, 4096, 16};
  if (name == "huge") return {48, 1600, 6400, 25};
  throw ConfigError("unknown model preset: " + name + " (expected tiny, base, large or huge)");
}

void BarConfig::validate() const {
  if (V < 2) throw ConfigError("V must be >= 2");
  if (time_steps == 0) throw ConfigError("time_steps must be >= 1");
  if (steps == 0) throw ConfigError("steps must be >= 1");
  if (batch == 0) throw ConfigError("batch must be >= 1");
  if (eval_every == 0) throw ConfigError("eval_every must be >= 1");
  model.validate();
}

Json to_json_value(const BarConfig& c) {
  return Json{{"scheme", c.scheme},
              {"scales", c.scales},
              {"V", c.V},
              {"time_steps", c.time_steps},
              {"max_text", c.max_text},
              {"model", nn::to_json_value(c.model)},
              {"mask", armask::to_string(c.mask)},
              {"steps", c.steps},
              {"batch", c.batch},
              {"eval_every", c.eval_every},
              {"optim", nn::to_json_value(c.optim)},
              {"seed", c.seed}};
}

void from_json_into_struct(const Json& j, BarConfig& c) {
  reject_unknown_keys(j,
                      {"scheme", "scales", "V", "time_steps", "max_text", "model", "mask", "steps", "batch",
                       "eval_every", "optim", "seed"},
                      "bar");
  read_key(j, "scheme", c.scheme);
  read_key(j, "scales", c.scales);
  read_key(j, "V", c.V);
  read_key(j, "time_steps", c.time_steps);
  read_key(j, "max_text", c.max_text);
  read_key(j, "model", c.model);
  std::string mask = armask::to_string(c.mask);
  read_key(j, "mask", mask);
  c.mask = armask::parse_mask_mode(mask);
  read_key(j, "steps", c.steps);
  read_key(j, "batch", c.batch);
  read_key(j, "eval_every", c.eval_every);
  read_key(j, "optim", c.optim);
  read_key(j, "seed", c.seed);
}

void SequenceBatch::push(std::size_t input_token, const std::vector<std::size_t>& position_rows,
                         std::size_t target, double w, bool valid) {
  inputs.add(input_token, 1.0);
  inputs.close_row();
  for (auto r : position_rows) positions.add(r, 1.0);
  positions.close_row();
  targets.push_back(target);
  weight.push_back(w);
  key_valid.push_back(valid ? 1 : 0);
}

void SequenceBatch::validate() const {
  const std::size_t n = batch * length;
  if (targets.size() != n || weight.size() != n || inputs.rows() != n || positions.rows() != n ||
      (!key_valid.empty() && key_valid.size() != n))
    throw ShapeError("dimension mismatch in sequence batch: expected " + std::to_string(n) + " rows");
  if (mask.length != length) throw ShapeError("dimension mismatch between sequence batch and mask");
}

BarModel::BarModel(BarConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  h_ = bth::load_hierarchy(cfg_.scheme);
  subset_ = cfg_.scales.empty() ? bth::ScaleSubset::all(h_) : bth::ScaleSubset::from_one_based(cfg_.scales);
  subset_.validate(h_);
  vocab_.eeg = cfg_.V;
  order_ = armask::flatten(h_, subset_, cfg_.time_steps);

  std::size_t rows = cfg_.time_steps + h_.scales();
  for (std::size_t s = 0; s < h_.scales(); ++s) {
    group_offset_.push_back(rows);
    rows += h_.groups(s);
  }
  text_offset_ = rows;
  rows += cfg_.max_text;

  nn::Rng rng(cfg_.seed);
  const std::size_t d = cfg_.model.hidden;
  tok_emb_ = nn::normal_param({vocab_.size(), d}, 0.02, rng);
  pos_emb_ = nn::normal_param({rows, d}, 0.02, rng);
  trunk_ = nn::Transformer(cfg_.model, rng);
  head_ = nn::Linear(d, vocab_.size(), rng);
}

std::vector<std::size_t> BarModel::eeg_position_rows(std::size_t t, std::size_t scale, std::size_t g) const {
  if (t >= cfg_.time_steps || scale >= h_.scales() || g >= h_.groups(scale))
    throw Error("(t, scale, group) out of range");
  return {t, cfg_.time_steps + scale, group_offset_[scale] + g};
}

std::size_t BarModel::text_position_row(std::size_t j) const {
  if (j >= cfg_.max_text)
    throw ShapeError("dimension mismatch: text position " + std::to_string(j) + " exceeds max_text " +
                     std::to_string(cfg_.max_text));
  return text_offset_ + j;
}

void BarModel::append_eeg(const vq::MultiScaleTokens& R, SequenceBatch& out) const {
  if (R.steps != cfg_.time_steps || R.maps.size() != subset_.size())
    throw ShapeError("dimension mismatch: token sequence does not match the model layout");
  for (std::size_t k = 0; k < subset_.size(); ++k)
    if (R.maps[k].scale != subset_[k] || R.maps[k].groups != h_.groups(subset_[k]) || R.maps[k].steps != R.steps)
      throw ShapeError("dimension mismatch: token map " + std::to_string(k) + " does not match the hierarchy");

  const auto mode = cfg_.mask;
  const std::size_t last = subset_.size() - 1;
  const auto& fine = R.maps[last];
  for (const auto& p : order_.positions) {
    const std::size_t target = R.maps[p.k].at(p.g, p.t);
    if (target >= cfg_.V) throw ShapeError("token outside the EEG vocabulary");
    if (p.k > 0 && mode != armask::MaskMode::TimeWise) {
      const auto parent = h_.ancestor(p.scale, p.g, subset_[p.k - 1]);
      out.inputs.add(R.maps[p.k - 1].at(parent, p.t), 1.0);
    } else if (p.t == 0 || mode == armask::MaskMode::ScaleWise) {
      out.inputs.add(vocab_.start(), 1.0);
    } else {
      // Mean embedding of the finest selected tokens at t-1 under this group.
      std::vector<std::size_t> members;
      for (std::size_t d = 0; d < fine.groups; ++d)
        if (h_.ancestor(subset_[last], d, p.scale) == p.g) members.push_back(d);
      const double w = 1.0 / static_cast<double>(members.size());
      for (auto d : members) out.inputs.add(fine.at(d, p.t - 1), w);
    }
    out.inputs.close_row();
    for (auto r : eeg_position_rows(p.t, p.scale, p.g)) out.positions.add(r, 1.0);
    out.positions.close_row();
    out.targets.push_back(target);
    out.weight.push_back(1.0);
    out.key_valid.push_back(1);
  }
}

nn::AttentionMask BarModel::mask(std::size_t text_len) const {
  const auto eeg = armask::build_mask(order_, cfg_.mask).expand(order_);
  if (text_len == 0) return eeg;
  const std::size_t E = order_.length(), L = E + text_len;
  nn::AttentionMask m;
  m.length = L;
  m.allowed.assign(L * L, 0);
  for (std::size_t i = 0; i < E; ++i)
    for (std::size_t j = 0; j < E; ++j) m.allowed[i * L + j] = eeg(i, j) ? 1 : 0;
  for (std::size_t i = E; i < L; ++i)
    for (std::size_t j = 0; j <= i; ++j) m.allowed[i * L + j] = 1;
  return m;
}

SequenceBatch BarModel::build_inputs(const std::vector<const vq::MultiScaleTokens*>& seqs) const {
  SequenceBatch b;
  b.batch = seqs.size();
  b.length = order_.length();
  for (const auto* R : seqs) append_eeg(*R, b);
  b.mask = mask();
  return b;
}

SequenceBatch BarModel::build_inputs(const vq::MultiScaleTokens& R) const {
  return build_inputs(std::vector<const vq::MultiScaleTokens*>{&R});
}

nn::Tensor BarModel::logits(const SequenceBatch& b) const {
  b.validate();
  if (b.batch == 0) throw ShapeError("dimension mismatch: empty sequence batch");
  auto x = nn::add(nn::mix_rows(tok_emb_, b.inputs), nn::mix_rows(pos_emb_, b.positions));
  auto y = trunk_(x, b.batch, b.length, b.mask, b.key_valid);
  return head_(y);
}

nn::ParamList BarModel::parameters() const {
  nn::ParamList out;
  out.push_back({"tok_emb", tok_emb_});
  out.push_back({"pos_emb", pos_emb_});
  trunk_.collect("trunk", out);
  head_.collect("head", out);
  return out;
}

void BarModel::save(const std::string& dir) const {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir + "/bar.json", std::ios::trunc);
    if (!out) throw Error("cannot write " + dir + "/bar.json");
    out << to_json_value(cfg_).dump(2) << "\n";
  }
  nn::save_checkpoint(dir + "/bar.ckpt", parameters());
}

BarModel BarModel::load(const std::string& dir) {
  std::ifstream in(dir + "/bar.json");
  if (!in) throw Error("missing upstream artifact: " + dir + "/bar.json");
  Json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed model config: " + std::string(e.what()));
  }
  BarConfig cfg;
  from_json_into_struct(j, cfg);
  BarModel m(cfg);
  if (!std::filesystem::exists(dir + "/bar.ckpt")) throw Error("missing upstream artifact: " + dir + "/bar.ckpt");
  nn::load_checkpoint(dir + "/bar.ckpt", m.parameters());
  return m;
}

}  // namespace thdbar::bar
