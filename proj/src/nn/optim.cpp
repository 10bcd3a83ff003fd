// SPDX-License-Identifier: Apache-2.0
#include "thdbar/nn/optim.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>

#include "thdbar/error.hpp"

namespace thdbar::nn {

double cosine_lr(const AdamWConfig& cfg, std::size_t step, std::size_t total_steps) {
  const double total = static_cast<double>(std::max<std::size_t>(total_steps, 1));
  const double warm = std::floor(cfg.warmup_fraction * total);
  const double s = static_cast<double>(step);
  if (s < warm) return cfg.peak_lr * (s + 1.0) / warm;
  const double progress = std::clamp((s - warm) / std::max(total - warm, 1.0), 0.0, 1.0);
  return cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

AdamW::AdamW(ParamList params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.size(), 0.0);
    v_.emplace_back(p.tensor.size(), 0.0);
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

double AdamW::step(double lr) {
  double sq = 0.0;
  for (auto& p : params_) {
    if (!p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  const double clip = (cfg_.grad_clip > 0.0 && norm > cfg_.grad_clip) ? cfg_.grad_clip / norm : 1.0;

  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& t = params_[k].tensor;
    if (!t.has_grad()) continue;
    auto val = t.value();
    auto grad = t.grad();
    const bool decay = t.ndim() >= 2;
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < val.size(); ++i) {
      const double g = grad[i] * clip;
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
      if (decay) val[i] -= lr * cfg_.weight_decay * val[i];
      val[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
    }
  }
  return norm;
}

std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

namespace {

constexpr char kCkptMagic[8] = {'T', 'H', 'D', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint32_t kCkptVersion = 1;

template <typename T>
void put(std::string& buf, T v) {
  char raw[sizeof(T)];
  std::memcpy(raw, &v, sizeof(T));
  buf.append(raw, sizeof(T));
}

template <typename T>
T take(const std::string& buf, std::size_t& pos) {
  if (pos + sizeof(T) > buf.size()) throw FormatError("malformed checkpoint: truncated");
  T v;
  std::memcpy(&v, buf.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamList& params) {
  std::string buf(kCkptMagic, sizeof(kCkptMagic));
  put<std::uint32_t>(buf, kCkptVersion);
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(p.name.size()));
    buf += p.name;
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(p.tensor.ndim()));
    for (auto d : p.tensor.shape()) put<std::uint64_t>(buf, d);
    for (double v : p.tensor.value()) put<double>(buf, v);
  }
  put<std::uint64_t>(buf, fnv1a64(buf.data(), buf.size()));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write checkpoint: " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw Error("cannot write checkpoint: " + path);
}

void load_checkpoint(const std::string& path, const ParamList& params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("missing upstream artifact: " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < sizeof(kCkptMagic) + 16 || std::memcmp(buf.data(), kCkptMagic, sizeof(kCkptMagic)) != 0)
    throw FormatError("malformed checkpoint header: " + path);
  std::uint64_t stored;
  std::memcpy(&stored, buf.data() + buf.size() - 8, 8);
  if (stored != fnv1a64(buf.data(), buf.size() - 8)) throw FormatError("checkpoint content hash mismatch: " + path);

  std::size_t pos = sizeof(kCkptMagic);
  if (take<std::uint32_t>(buf, pos) != kCkptVersion) throw FormatError("unknown format version in " + path);
  const auto count = take<std::uint32_t>(buf, pos);
  std::map<std::string, std::pair<Shape, std::vector<double>>> archive;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = take<std::uint32_t>(buf, pos);
    if (pos + len > buf.size()) throw FormatError("malformed checkpoint: truncated name");
    std::string name = buf.substr(pos, len);
    pos += len;
    Shape shape(take<std::uint32_t>(buf, pos));
    for (auto& d : shape) d = take<std::uint64_t>(buf, pos);
    std::vector<double> vals(numel(shape));
    for (auto& v : vals) v = take<double>(buf, pos);
    archive[name] = {std::move(shape), std::move(vals)};
  }
  for (const auto& p : params) {
    auto it = archive.find(p.name);
    if (it == archive.end()) throw FormatError("checkpoint lacks tensor " + p.name);
    if (it->second.first != p.tensor.shape())
      throw FormatError("dimension mismatch for " + p.name + ": " + shape_str(it->second.first) + " vs " +
                        shape_str(p.tensor.shape()));
    auto dst = Tensor(p.tensor).value();
    std::copy(it->second.second.begin(), it->second.second.end(), dst.begin());
  }
}

GradCheckResult grad_check(const std::function<Tensor()>& loss_fn, const std::vector<Tensor>& params, double eps,
                           std::size_t max_per_param) {
  std::vector<Tensor> ps = params;
  for (auto& p : ps) p.zero_grad();
  Tensor loss = loss_fn();
  if (!std::isfinite(loss.item())) throw Error("non-finite loss in grad_check");
  loss.backward();

  GradCheckResult res;
  for (auto& p : ps) {
    std::vector<double> analytic(p.grad().begin(), p.grad().end());
    auto val = p.value();
    const std::size_t n = val.size();
    const std::size_t stride = std::max<std::size_t>(1, n / std::max<std::size_t>(max_per_param, 1));
    for (std::size_t i = 0; i < n; i += stride) {
      const double orig = val[i];
      val[i] = orig + eps;
      const double up = loss_fn().item();
      val[i] = orig - eps;
      const double down = loss_fn().item();
      val[i] = orig;
      if (!std::isfinite(up) || !std::isfinite(down)) throw Error("non-finite loss in grad_check");
      const double numeric = (up - down) / (2.0 * eps);
      const double abs_err = std::abs(numeric - analytic[i]);
      const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), 1e-6});
      res.max_abs_error = std::max(res.max_abs_error, abs_err);
      res.max_rel_error = std::max(res.max_rel_error, abs_err / denom);
      ++res.checked;
    }
  }
  return res;
}

}  // namespace thdbar::nn
