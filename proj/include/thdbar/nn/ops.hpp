// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "thdbar/nn/tensor.hpp"

namespace thdbar::nn {

// Row-major boolean permission matrix for attention: allowed(i, j) means
// query i may read key j.
struct AttentionMask {
  std::size_t length = 0;
  std::vector<std::uint8_t> allowed;

  static AttentionMask full(std::size_t n);
  static AttentionMask causal(std::size_t n);
  static AttentionMask diagonal(std::size_t n);
  bool operator()(std::size_t i, std::size_t j) const { return allowed[i * length + j] != 0; }
};

// Sparse row combination: output row r = sum_k weight[k] * table[index[k]]
// for k in [offsets[r], offsets[r+1]).
struct RowMix {
  std::vector<std::size_t> offsets{0};
  std::vector<std::size_t> index;
  std::vector<double> weight;

  void add(std::size_t row, double w) {
    index.push_back(row);
    weight.push_back(w);
  }
  void close_row() { offsets.push_back(index.size()); }
  std::size_t rows() const { return offsets.size() - 1; }
};

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor gelu(const Tensor& a);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// Masked multi-head self-attention over `batch` sequences of `length`
// positions. qkv is [batch*length, 3*d]. Keys that are forbidden by `mask`
// or invalid in `key_valid` ([batch*length], may be empty) receive exactly
// zero weight and never enter the computation.
Tensor attention(const Tensor& qkv, std::size_t batch, std::size_t length, std::size_t heads,
                 const AttentionMask& mask, std::span<const std::uint8_t> key_valid = {});

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids);
Tensor mix_rows(const Tensor& table, const RowMix& mix);
Tensor reshape(const Tensor& x, Shape shape);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
Tensor concat_rows(const std::vector<Tensor>& parts);

// Channels-last 1-D convolution: x [m, len, c_in], w [k*c_in, c_out],
// b [c_out] -> [m, len_out, c_out].
Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t kernel,
              std::size_t stride, std::size_t pad);
Tensor mean_over_time(const Tensor& x);

// sum_r row_weight[r] * sum_c (pred[r, c] - target[r, c])^2
Tensor weighted_sq_error(const Tensor& pred, std::span<const double> target,
                         std::span<const double> row_weight);
// sum_i weight[i] * -log softmax(logits[i, lo:hi])[target[i] - lo]
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets,
                     std::span<const double> weight, std::size_t lo, std::size_t hi);

Tensor sum(const Tensor& x);
Tensor dot_const(const Tensor& x, std::span<const double> w);
Tensor detach(const Tensor& x);
// Forward identity; backward multiplies the incoming gradient by -lambda.
Tensor grad_reverse(const Tensor& x, double lambda);

}  // namespace thdbar::nn
