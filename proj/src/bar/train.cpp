// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <random>

#include "thdbar/bar.hpp"
#include "thdbar/error.hpp"
#include "thdbar/parallel.hpp"

namespace thdbar::bar {

namespace {

// log softmax over [lo, hi) of one logit row at `target`.
double row_log_prob(const double* z, std::size_t lo, std::size_t hi, std::size_t target) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = lo; j < hi; ++j) mx = std::max(mx, z[j]);
  double s = 0.0;
  for (std::size_t j = lo; j < hi; ++j) s += std::exp(z[j] - mx);
  return z[target] - mx - std::log(s);
}

std::size_t argmax(const double* z, std::size_t lo, std::size_t hi) {
  std::size_t best = lo;
  for (std::size_t j = lo + 1; j < hi; ++j)
    if (z[j] > z[best]) best = j;
  return best;
}

std::vector<std::size_t> split_indices(const vq::TokenCorpus& c, std::uint8_t split) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < c.sequences.size(); ++i)
    if (c.split[i] == split) out.push_back(i);
  return out;
}

}  // namespace

NstpOutput nstp_forward(const BarModel& m, const SequenceBatch& b, std::optional<std::size_t> lo,
                        std::optional<std::size_t> hi) {
  const std::size_t l = lo.value_or(0), u = hi.value_or(m.config().V);
  NstpOutput out;
  out.logits = m.logits(b);
  double total = 0.0;
  for (double w : b.weight) total += w;
  std::vector<double> w(b.weight.size(), 0.0);
  if (total > 0.0)
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = b.weight[i] / total;
  out.loss = nn::cross_entropy(out.logits, b.targets, w, l, u);

  const std::size_t v = out.logits.dim(1);
  const auto z = out.logits.value();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < b.rows(); ++i) {
    if (b.weight[i] == 0.0) continue;
    ++out.counted;
    if (argmax(z.data() + i * v, l, u) == b.targets[i]) ++correct;
  }
  out.accuracy = out.counted ? static_cast<double>(correct) / static_cast<double>(out.counted) : 0.0;
  return out;
}

nn::Tensor nstp_loss(const BarModel& m, const SequenceBatch& b) { return nstp_forward(m, b).loss; }

std::vector<double> row_log_probs(const BarModel& m, const SequenceBatch& b) {
  const auto logits = m.logits(b);
  const std::size_t v = logits.dim(1), V = m.config().V;
  const auto z = logits.value();
  std::vector<double> out(b.rows(), 0.0);
  for (std::size_t i = 0; i < b.rows(); ++i)
    if (b.weight[i] != 0.0) out[i] = row_log_prob(z.data() + i * v, 0, V, b.targets[i]);
  return out;
}

double log_likelihood(const BarModel& m, const vq::MultiScaleTokens& R) {
  double s = 0.0;
  for (double lp : row_log_probs(m, m.build_inputs(R))) s += lp;
  return s;
}

double perplexity(const BarModel& m, const std::vector<const vq::MultiScaleTokens*>& seqs, std::size_t chunk) {
  if (seqs.empty()) throw Error("perplexity needs at least one sequence");
  if (chunk == 0) chunk = 1;
  const std::size_t parts = (seqs.size() + chunk - 1) / chunk;
  std::vector<std::vector<double>> lps(parts);
  parallel_for(parts, [&](std::size_t c) {
    const auto first = seqs.begin() + static_cast<std::ptrdiff_t>(c * chunk);
    const auto last = seqs.begin() + static_cast<std::ptrdiff_t>(std::min(seqs.size(), (c + 1) * chunk));
    lps[c] = row_log_probs(m, m.build_inputs(std::vector<const vq::MultiScaleTokens*>(first, last)));
  });
  double nll = 0.0;
  std::size_t n = 0;
  for (const auto& part : lps)
    for (double lp : part) {
      nll -= lp;
      ++n;
    }
  return std::exp(nll / static_cast<double>(n));
}

vq::MultiScaleTokens generate(const BarModel& m, const vq::MultiScaleTokens& prefix, std::size_t prefix_blocks,
                              double temperature, std::uint64_t seed) {
  if (!(temperature > 0.0)) throw ConfigError("temperature must be > 0");
  const auto& order = m.order();
  if (prefix_blocks > order.blocks()) throw ShapeError("dimension mismatch: prefix longer than the sequence");
  const auto& sub = m.subset();
  bool shape_ok = prefix.steps == m.config().time_steps && prefix.maps.size() == sub.size();
  for (std::size_t k = 0; shape_ok && k < sub.size(); ++k)
    shape_ok = prefix.maps[k].groups == m.hierarchy().groups(sub[k]) && prefix.maps[k].steps == prefix.steps &&
               prefix.maps[k].tokens.size() == prefix.maps[k].groups * prefix.steps;
  if (!shape_ok) throw ShapeError("dimension mismatch: prefix does not match the model layout");
  auto out = prefix;
  for (std::size_t b = prefix_blocks; b < order.blocks(); ++b)
    for (std::size_t i = order.block_begin[b]; i < order.block_begin[b + 1]; ++i) {
      const auto& p = order.positions[i];
      out.maps[p.k].at(p.g, p.t) = 0;
    }

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const bool greedy = temperature < 1e-6;
  const std::size_t V = m.config().V;
  std::vector<double> p(V);
  for (std::size_t b = prefix_blocks; b < order.blocks(); ++b) {
    const auto logits = m.logits(m.build_inputs(out));
    const std::size_t v = logits.dim(1);
    const auto z = logits.value();
    for (std::size_t i = order.block_begin[b]; i < order.block_begin[b + 1]; ++i) {
      const double* zi = z.data() + i * v;
      std::size_t tok = 0;
      if (greedy) {
        tok = argmax(zi, 0, V);
      } else {
        const double mx = *std::max_element(zi, zi + V);
        double s = 0.0;
        for (std::size_t j = 0; j < V; ++j) s += (p[j] = std::exp((zi[j] - mx) / temperature));
        double u = unif(rng) * s;
        tok = V - 1;
        for (std::size_t j = 0; j < V; ++j) {
          if (u < p[j]) {
            tok = j;
            break;
          }
          u -= p[j];
        }
      }
      const auto& pos = order.positions[i];
      out.maps[pos.k].at(pos.g, pos.t) = static_cast<vq::Token>(tok);
    }
  }
  return out;
}

BarConfig adapt_to_corpus(BarConfig cfg, const vq::TokenCorpus& corpus) {
  cfg.scheme = corpus.scheme;
  cfg.scales.clear();
  for (auto s : corpus.scales) cfg.scales.push_back(static_cast<int>(s) + 1);
  cfg.V = corpus.V;
  cfg.time_steps = corpus.steps;
  return cfg;
}

PretrainResult pretrain(const vq::TokenCorpus& corpus, const BarConfig& cfg,
                        const std::function<void(const PretrainRow&)>& on_row) {
  BarModel model(cfg);
  if (corpus.V != cfg.V || corpus.steps != cfg.time_steps || corpus.scales != model.subset().scales)
    throw ConfigError("dimension mismatch: token corpus (V " + std::to_string(corpus.V) + ", T " +
                      std::to_string(corpus.steps) + ") does not match the model config");
  for (const auto& R : corpus.sequences) R.validate(model.hierarchy(), cfg.V);
  const auto train = split_indices(corpus, 0);
  const auto val = split_indices(corpus, 1);
  if (train.empty()) throw ConfigError("token corpus has no training sequences");
  if (val.empty()) throw ConfigError("token corpus has no validation sequences");
  std::vector<const vq::MultiScaleTokens*> val_seqs;
  for (auto i : val) val_seqs.push_back(&corpus.sequences[i]);

  nn::AdamW opt(model.parameters(), cfg.optim);
  std::mt19937_64 rng(cfg.seed ^ 0x7072657472616eULL);
  std::uniform_int_distribution<std::size_t> pick(0, train.size() - 1);
  auto draw = [&] {
    std::vector<const vq::MultiScaleTokens*> seqs;
    for (std::size_t i = 0; i < cfg.batch; ++i) seqs.push_back(&corpus.sequences[train[pick(rng)]]);
    return model.build_inputs(seqs);
  };

  PretrainResult res{model, {}};
  auto emit = [&](PretrainRow row) {
    res.report.push_back(row);
    if (on_row) on_row(row);
  };
  {
    auto first = nstp_forward(model, draw());
    emit({0, first.loss.item(), first.accuracy, perplexity(model, val_seqs)});
  }
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    auto out = nstp_forward(model, draw());
    const double loss = out.loss.item();
    if (!std::isfinite(loss))
      throw Error("pretraining diverged at step " + std::to_string(step) + ": non-finite loss");
    opt.zero_grad();
    out.loss.backward();
    opt.step(nn::cosine_lr(cfg.optim, step - 1, cfg.steps));
    if (step % cfg.eval_every == 0 || step == cfg.steps)
      emit({step, loss, out.accuracy, perplexity(model, val_seqs)});
  }
  return res;
}

void write_report(const std::string& path, const std::vector<PretrainRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path);
  out << "# loss: mean cross-entropy per token over the EEG range\n";
  out << "step,loss,token_acc,ppl_val\n";
  char buf[64];
  for (const auto& r : rows) {
    out << r.step;
    std::snprintf(buf, sizeof buf, ",%.9g,%.9g,", r.loss, r.token_acc);
    out << buf;
    if (r.ppl_val) {
      std::snprintf(buf, sizeof buf, "%.9g", *r.ppl_val);
      out << buf;
    }
    out << "\n";
  }
}

vq::TokenCorpus planted_corpus(const PlantedCorpusConfig& cfg) {
  if (cfg.V < 2 || cfg.time_steps == 0) throw ConfigError("planted corpus needs V >= 2 and time_steps >= 1");
  if (!(cfg.noise >= 0.0 && cfg.noise <= 1.0)) throw ConfigError("planted corpus noise must lie in [0, 1]");
  const auto h = bth::load_hierarchy(cfg.scheme);
  const auto subset = cfg.scales.empty() ? bth::ScaleSubset::all(h) : bth::ScaleSubset::from_one_based(cfg.scales);
  subset.validate(h);

  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> tok(0, cfg.V - 1);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<std::vector<std::size_t>> offset(h.scales());
  for (std::size_t s = 0; s < h.scales(); ++s)
    for (std::size_t g = 0; g < h.groups(s); ++g) offset[s].push_back(tok(rng));
  const std::size_t mult = cfg.V % 3 == 0 ? 5 : 3;

  vq::TokenCorpus c;
  c.scheme = cfg.scheme;
  c.group_counts = h.group_counts();
  c.scales = subset.scales;
  c.steps = cfg.time_steps;
  c.V = cfg.V;
  for (std::size_t n = 0; n < cfg.train + cfg.val; ++n) {
    std::vector<vq::TokenMap> full;
    for (std::size_t s = 0; s < h.scales(); ++s) full.emplace_back(s, h.groups(s), cfg.time_steps);
    for (std::size_t t = 0; t < cfg.time_steps; ++t)
      for (std::size_t s = 0; s < h.scales(); ++s)
        for (std::size_t g = 0; g < h.groups(s); ++g) {
          std::size_t v = 0;
          if (s == 0)
            v = t == 0 ? tok(rng) : (full[0].at(0, t - 1) + 1) % cfg.V;
          else
            v = (mult * full[s - 1].at(h.ancestor(s, g, s - 1), t) + offset[s][g]) % cfg.V;
          if (unif(rng) < cfg.noise) v = tok(rng);
          full[s].at(g, t) = static_cast<vq::Token>(v);
        }
    vq::MultiScaleTokens R;
    R.steps = cfg.time_steps;
    for (auto s : subset.scales) R.maps.push_back(full[s]);
    c.sequences.push_back(std::move(R));
    c.labels.emplace_back(std::nullopt);
    c.split.push_back(n < cfg.train ? 0 : 1);
  }
  return c;
}

}  // namespace thdbar::bar
