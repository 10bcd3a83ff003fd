// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "thdbar/error.hpp"
#include "thdbar/tokenizer.hpp"

namespace thdbar::tokenizer {

namespace {

struct Targets {
  std::vector<double> eeg, fre, weight;
};

Targets make_targets(const WindowSet& data, std::span<const std::size_t> ids) {
  Targets out;
  const std::size_t P = data.patch_len, per = data.rows_per_window();
  out.eeg.reserve(ids.size() * per * P);
  out.fre.reserve(ids.size() * per * (P / 2 + 1));
  for (auto w : ids) {
    for (std::size_t r = 0; r < per; ++r) {
      const double* p = data.patches.data() + (w * per + r) * P;
      out.eeg.insert(out.eeg.end(), p, p + P);
      const auto mag = nn::dft_magnitude(std::span<const double>(p, P));
      out.fre.insert(out.fre.end(), mag.begin(), mag.end());
      out.weight.push_back(data.padded[w * per + r] ? 0.0 : 1.0);
    }
  }
  return out;
}

// Pooled residual rows of one step whose group holds no padded patch, with
// their tokens; these feed the EMA update.
void collect_assignments(const TokenizerModel& m, const WindowSet& data, std::span<const std::size_t> ids,
                         const std::vector<vq::MultiScaleTokens>& tokens, const std::vector<vq::EncodeTrace>& traces,
                         std::vector<double>& feats, std::vector<vq::Token>& toks) {
  const auto& h = m.hierarchy();
  const std::size_t C = m.codebook().C;
  feats.clear();
  toks.clear();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const std::size_t w = ids[i];
    for (std::size_t k = 0; k < m.subset().size(); ++k) {
      const std::size_t s = m.subset()[k];
      const auto& pooled = traces[i].pooled[k];
      const auto& map = tokens[i].maps[k];
      for (std::size_t g = 0; g < pooled.groups; ++g)
        for (std::size_t t = 0; t < pooled.steps; ++t) {
          bool pad = false;
          for (auto ch : h.group(s, g)) pad = pad || data.padded[(w * data.n_channels + ch) * data.steps + t] != 0;
          if (pad) continue;
          const double* row = pooled.row(g, t);
          feats.insert(feats.end(), row, row + C);
          toks.push_back(map.at(g, t));
        }
    }
  }
}

// Codebook rows drawn from the first batch's pooled residuals.
void init_codebook_from(vq::Codebook& cb, std::span<const double> feats, std::mt19937_64& rng) {
  const std::size_t n = feats.size() / cb.C;
  if (n == 0) return;
  std::vector<double> rows(cb.V * cb.C);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  for (std::size_t k = 0; k < cb.V; ++k) {
    const std::size_t r = pick(rng);
    std::copy(feats.begin() + static_cast<std::ptrdiff_t>(r * cb.C),
              feats.begin() + static_cast<std::ptrdiff_t>((r + 1) * cb.C),
              rows.begin() + static_cast<std::ptrdiff_t>(k * cb.C));
  }
  cb = vq::Codebook(cb.V, cb.C, std::move(rows));
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

double evaluate_pcc(const TokenizerModel& m, const WindowSet& data, std::span<const std::size_t> ids) {
  std::vector<double> x, y;
  const std::size_t P = data.patch_len, per = data.rows_per_window();
  const std::size_t chunk = std::max<std::size_t>(1, m.config().batch);
  for (std::size_t b = 0; b < ids.size(); b += chunk) {
    const auto part = ids.subspan(b, std::min(chunk, ids.size() - b));
    auto f = m.encode_features(data, part);
    auto q = m.quantized_features(m.quantize(f.value(), part.size()));
    const auto rec_t = m.decode_time(nn::detach(q), part.size());
    const auto rec = rec_t.value();
    for (std::size_t i = 0; i < part.size(); ++i)
      for (std::size_t r = 0; r < per; ++r) {
        if (data.padded[part[i] * per + r]) continue;
        const double* src = data.patches.data() + (part[i] * per + r) * P;
        x.insert(x.end(), src, src + P);
        const auto off = static_cast<std::ptrdiff_t>((i * per + r) * P);
        y.insert(y.end(), rec.begin() + off, rec.begin() + off + static_cast<std::ptrdiff_t>(P));
      }
  }
  return pcc(x, y);
}

ForwardOutputs forward_batch(const TokenizerModel& m, const WindowSet& data, std::span<const std::size_t> ids,
                             double lambda, std::span<const std::size_t> text_chars) {
  ForwardOutputs out;
  const std::size_t nb = ids.size();
  auto f = m.encode_features(data, ids);
  out.tokens = m.quantize(f.value(), nb, &out.traces);
  auto f_hat = m.quantized_features(out.tokens);
  auto f_st = nn::add(f_hat, nn::sub(f, nn::detach(f)));
  const auto tgt = make_targets(data, ids);

  LossInputs in;
  in.eeg_hat = m.decode_time(f_st, nb);
  in.eeg = tgt.eeg;
  in.fre_hat = m.decode_freq(f_st, nb);
  in.fre = tgt.fre;
  in.f = f;
  in.f_hat = f_hat;
  in.row_weight = tgt.weight;
  in.batch = nb;
  in.beta = m.config().beta;
  in.lambda = lambda;
  std::vector<std::size_t> labels;
  if (m.config().domain_branch) {
    std::vector<std::size_t> eeg_rows;
    for (std::size_t r = 0; r < tgt.weight.size(); ++r)
      if (tgt.weight[r] > 0.0) eeg_rows.push_back(r);
    std::vector<nn::Tensor> parts;
    if (!eeg_rows.empty()) parts.push_back(nn::gather_rows(nn::grad_reverse(f, 1.0), eeg_rows));
    if (!text_chars.empty()) parts.push_back(m.text_features(text_chars));
    if (!parts.empty()) {
      in.domain_logits = m.domain_logits(nn::concat_rows(parts));
      labels.assign(eeg_rows.size(), 0);
      labels.resize(eeg_rows.size() + text_chars.size(), 1);
      in.domain_labels = labels;
    }
  }
  out.loss = compound_loss(in);
  return out;
}

TrainResult train_tokenizer(const WindowSet& data, const TokenizerConfig& cfg,
                            const std::function<void(const ReportRow&)>& on_step) {
  cfg.validate();
  const auto train_ids = data.indices(signalio::Split::Train);
  const auto val_ids = data.indices(signalio::Split::Val);
  if (train_ids.empty()) throw Error("tokenizer training needs at least one training window");

  TrainResult res{TokenizerModel(cfg), {}, 0.0};
  auto& m = res.model;
  nn::AdamW opt(m.parameters(), cfg.optim);
  std::mt19937_64 rng(cfg.seed ^ 0x747261696eULL);
  std::mt19937_64 text_rng(cfg.seed ^ 0x74657874ULL);
  std::uniform_int_distribution<std::size_t> pick_char(0, 94);

  std::vector<std::size_t> order = train_ids;
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;
  std::vector<double> feats, last_feats;
  std::vector<vq::Token> toks;

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const std::size_t nb = std::min(cfg.batch, order.size() - cursor);
    const std::span<const std::size_t> ids(order.data() + cursor, nb);
    cursor += nb;

    if (step == 0) {
      auto f0 = m.encode_features(data, ids);
      std::vector<vq::EncodeTrace> traces0;
      auto tokens0 = m.quantize(f0.value(), nb, &traces0);
      collect_assignments(m, data, ids, tokens0, traces0, feats, toks);
      init_codebook_from(m.codebook(), feats, rng);
    }
    std::vector<std::size_t> chars;
    if (cfg.domain_branch) {
      chars.resize(cfg.text_rows);
      for (auto& c : chars) c = pick_char(text_rng);
    }
    const double lambda = cfg.domain_weight * lambda_at(step, cfg.steps);
    ForwardOutputs fw;
    try {
      fw = forward_batch(m, data, ids, lambda, chars);
    } catch (const ShapeError&) {
      throw;
    } catch (const Error& e) {
      throw Error("tokenizer training failed at step " + std::to_string(step) + ": " + e.what());
    }
    auto& loss = fw.loss;
    const double total = loss.total.item();
    if (!std::isfinite(total)) {
      std::ostringstream msg;
      msg << "non-finite tokenizer loss at step " << step << " (time " << loss.time << ", freq " << loss.freq
          << ", commit " << loss.commit << ", domain " << loss.domain << ")";
      throw Error(msg.str());
    }
    opt.zero_grad();
    loss.total.backward();
    opt.step(nn::cosine_lr(cfg.optim, step, cfg.steps));

    collect_assignments(m, data, ids, fw.tokens, fw.traces, feats, toks);
    if (!toks.empty()) {
      vq::codebook_train_step(m.codebook(), feats, toks, cfg.ema_decay, cfg.beta);
      last_feats = feats;
    }

    ReportRow row{step, total, loss.time, loss.freq, loss.commit, loss.domain, lambda, std::nullopt};
    const bool epoch_end = cursor >= order.size();
    if (epoch_end) {
      if (!last_feats.empty()) vq::end_epoch(m.codebook(), last_feats, rng, cfg.dead_code_patience);
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    if ((epoch_end || step + 1 == cfg.steps) && !val_ids.empty()) {
      row.pcc_val = evaluate_pcc(m, data, val_ids);
      res.final_pcc = *row.pcc_val;
    }
    res.report.push_back(row);
    if (on_step) on_step(row);
  }
  return res;
}

TrainResult train_tokenizer(const std::string& manifest_path, const TokenizerConfig& cfg) {
  return train_tokenizer(load_windows(manifest_path, cfg.window_len, cfg.patch_len), cfg);
}

void write_report(const std::string& path, const std::vector<ReportRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path);
  out << "# reduction: sum over elements, mean over batch; padded patches excluded\n";
  out << "step,loss_total,loss_time,loss_freq,loss_commit,loss_domain,lambda,pcc_val\n";
  for (const auto& r : rows) {
    out << r.step << ',' << fmt(r.total) << ',' << fmt(r.time) << ',' << fmt(r.freq) << ',' << fmt(r.commit) << ','
        << fmt(r.domain) << ',' << fmt(r.lambda) << ',' << (r.pcc_val ? fmt(*r.pcc_val) : std::string()) << '\n';
  }
  if (!out) throw Error("cannot write " + path);
}

}  // namespace thdbar::tokenizer
