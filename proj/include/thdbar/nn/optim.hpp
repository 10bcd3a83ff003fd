// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "thdbar/nn/layers.hpp"

namespace thdbar::nn {

struct AdamWConfig {
  double peak_lr = 1e-3;
  double min_lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  double warmup_fraction = 0.1;
  double grad_clip = 0.0;  // <= 0 disables clipping
};

// Linear warm-up followed by cosine decay from peak_lr to min_lr.
double cosine_lr(const AdamWConfig& cfg, std::size_t step, std::size_t total_steps);

// Decoupled weight decay applies to parameters with two or more dimensions.
class AdamW {
 public:
  AdamW(ParamList params, AdamWConfig cfg);

  void zero_grad();
  // Returns the pre-clipping global gradient norm.
  double step(double lr);
  const AdamWConfig& config() const { return cfg_; }
  std::size_t steps_taken() const { return t_; }

 private:
  ParamList params_;
  AdamWConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

// Named-tensor archive: magic, version, count, then per tensor the name,
// shape and float64 values; a trailing FNV-1a 64 content hash covers every
// preceding byte.
void save_checkpoint(const std::string& path, const ParamList& params);
// Copies archived values into `params` by name; every name must be present
// with an identical shape.
void load_checkpoint(const std::string& path, const ParamList& params);
std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t seed = 1469598103934665603ULL);

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
};

// Compares analytic gradients of `loss_fn` w.r.t. `params` against central
// finite differences. At most `max_per_param` entries per tensor are probed
// (evenly strided). Throws on a non-finite loss.
GradCheckResult grad_check(const std::function<Tensor()>& loss_fn, const std::vector<Tensor>& params,
                           double eps = 1e-4, std::size_t max_per_param = 64);

}  // namespace thdbar::nn
