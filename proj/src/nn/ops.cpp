// SPDX-License-Identifier: Apache-2.0
#include "thdbar/nn/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>

#include "thdbar/error.hpp"

namespace thdbar::nn {
namespace {

using RMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<RMat>;
using CMapM = Eigen::Map<const RMat>;
using Strided = Eigen::Map<RMat, 0, Eigen::OuterStride<>>;
using CStrided = Eigen::Map<const RMat, 0, Eigen::OuterStride<>>;

// dst[c] += sum_r g[r, c], rows in order, so the result does not depend on
// buffer alignment.
void add_column_sums(const double* g, std::size_t rows, std::size_t cols, double* dst) {
  std::vector<double> acc(cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) acc[c] += g[r * cols + c];
  for (std::size_t c = 0; c < cols; ++c) dst[c] += acc[c];
}

void check(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError("shape mismatch: " + msg);
}

std::size_t rows_of(const Tensor& t) { return t.ndim() == 0 ? 1 : t.dim(0); }
std::size_t cols_of(const Tensor& t) { return t.size() / std::max<std::size_t>(rows_of(t), 1); }

}  // namespace

AttentionMask AttentionMask::full(std::size_t n) {
  return AttentionMask{n, std::vector<std::uint8_t>(n * n, 1)};
}

AttentionMask AttentionMask::causal(std::size_t n) {
  AttentionMask m{n, std::vector<std::uint8_t>(n * n, 0)};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) m.allowed[i * n + j] = 1;
  return m;
}

AttentionMask AttentionMask::diagonal(std::size_t n) {
  AttentionMask m{n, std::vector<std::uint8_t>(n * n, 0)};
  for (std::size_t i = 0; i < n; ++i) m.allowed[i * n + i] = 1;
  return m;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  check(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(0),
        "matmul " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
  const auto n = a.dim(0), k = a.dim(1), m = b.dim(1);
  std::vector<double> out(n * m);
  MapM(out.data(), n, m).noalias() = CMapM(a.value().data(), n, k) * CMapM(b.value().data(), k, m);
  auto an = a.ptr(), bn = b.ptr();
  return make_result({n, m}, std::move(out), {a, b}, [an, bn, n, k, m](Node& self) {
    CMapM g(self.grad.data(), n, m);
    if (an->requires_grad)
      MapM(an->ensure_grad().data(), n, k).noalias() += g * CMapM(bn->value.data(), k, m).transpose();
    if (bn->requires_grad)
      MapM(bn->ensure_grad().data(), k, m).noalias() += CMapM(an->value.data(), n, k).transpose() * g;
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  check(w.ndim() == 2 && x.size() % w.dim(0) == 0, "linear " + shape_str(x.shape()) + " * " +
                                                         shape_str(w.shape()));
  const auto k = w.dim(0), m = w.dim(1), n = x.size() / k;
  check(!b.defined() || b.size() == m, "linear bias");
  std::vector<double> out(n * m);
  MapM y(out.data(), n, m);
  y.noalias() = CMapM(x.value().data(), n, k) * CMapM(w.value().data(), k, m);
  if (b.defined()) y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.value().data(), m);
  Shape shape = x.shape();
  shape.back() = m;
  if (x.ndim() == 1) shape = {m};
  auto xn = x.ptr(), wn = w.ptr();
  auto bn = b.defined() ? b.ptr() : nullptr;
  return make_result(shape, std::move(out), {x, w, b}, [xn, wn, bn, n, k, m](Node& self) {
    CMapM g(self.grad.data(), n, m);
    if (xn->requires_grad)
      MapM(xn->ensure_grad().data(), n, k).noalias() += g * CMapM(wn->value.data(), k, m).transpose();
    if (wn->requires_grad)
      MapM(wn->ensure_grad().data(), k, m).noalias() += CMapM(xn->value.data(), n, k).transpose() * g;
    if (bn && bn->requires_grad) add_column_sums(self.grad.data(), n, m, bn->ensure_grad().data());
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  check(a.size() == b.size(), "add " + shape_str(a.shape()) + " + " + shape_str(b.shape()));
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  auto an = a.ptr(), bn = b.ptr();
  return make_result(a.shape(), std::move(out), {a, b}, [an, bn](Node& self) {
    for (auto* n : {an.get(), bn.get()}) {
      if (!n->requires_grad) continue;
      auto& g = n->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check(a.size() == b.size(), "sub " + shape_str(a.shape()) + " - " + shape_str(b.shape()));
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  auto an = a.ptr(), bn = b.ptr();
  return make_result(a.shape(), std::move(out), {a, b}, [an, bn](Node& self) {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check(a.size() == b.size(), "mul " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  auto an = a.ptr(), bn = b.ptr();
  return make_result(a.shape(), std::move(out), {a, b}, [an, bn](Node& self) {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an->value[i];
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * s;
  auto an = a.ptr();
  return make_result(a.shape(), std::move(out), {a}, [an, s](Node& self) {
    auto& g = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
  });
}

Tensor gelu(const Tensor& a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  std::vector<double> out(a.size());
  auto x = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double u = kC * (x[i] + kA * x[i] * x[i] * x[i]);
    out[i] = 0.5 * x[i] * (1.0 + std::tanh(u));
  }
  auto an = a.ptr();
  return make_result(a.shape(), std::move(out), {a}, [an](Node& self) {
    auto& g = an->ensure_grad();
    const auto& xv = an->value;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double xi = xv[i];
      const double th = std::tanh(kC * (xi + kA * xi * xi * xi));
      const double d = 0.5 * (1.0 + th) + 0.5 * xi * (1.0 - th * th) * kC * (1.0 + 3.0 * kA * xi * xi);
      g[i] += self.grad[i] * d;
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const auto d = gamma.size();
  check(beta.size() == d && x.size() % d == 0, "layer_norm");
  const auto n = x.size() / d;
  std::vector<double> out(x.size()), xhat(x.size()), inv_std(n);
  auto xv = x.value();
  auto gv = gamma.value(), bv = beta.value();
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = xv.data() + r * d;
    double mean = 0.0;
    for (std::size_t c = 0; c < d; ++c) mean += row[c];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t c = 0; c < d; ++c) {
      const double h = (row[c] - mean) * is;
      xhat[r * d + c] = h;
      out[r * d + c] = h * gv[c] + bv[c];
    }
  }
  auto xn = x.ptr(), gn = gamma.ptr(), bn = beta.ptr();
  return make_result(x.shape(), std::move(out), {x, gamma, beta},
                     [xn, gn, bn, n, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                       const auto& g = self.grad;
                       if (gn->requires_grad) {
                         auto& gg = gn->ensure_grad();
                         for (std::size_t r = 0; r < n; ++r)
                           for (std::size_t c = 0; c < d; ++c) gg[c] += g[r * d + c] * xhat[r * d + c];
                       }
                       if (bn->requires_grad) {
                         auto& gb = bn->ensure_grad();
                         for (std::size_t r = 0; r < n; ++r)
                           for (std::size_t c = 0; c < d; ++c) gb[c] += g[r * d + c];
                       }
                       if (xn->requires_grad) {
                         auto& gx = xn->ensure_grad();
                         const auto& gam = gn->value;
                         for (std::size_t r = 0; r < n; ++r) {
                           double m1 = 0.0, m2 = 0.0;
                           for (std::size_t c = 0; c < d; ++c) {
                             const double dh = g[r * d + c] * gam[c];
                             m1 += dh;
                             m2 += dh * xhat[r * d + c];
                           }
                           m1 /= static_cast<double>(d);
                           m2 /= static_cast<double>(d);
                           for (std::size_t c = 0; c < d; ++c) {
                             const double dh = g[r * d + c] * gam[c];
                             gx[r * d + c] += inv_std[r] * (dh - m1 - xhat[r * d + c] * m2);
                           }
                         }
                       }
                     });
}

Tensor attention(const Tensor& qkv, std::size_t batch, std::size_t length, std::size_t heads,
                 const AttentionMask& mask, std::span<const std::uint8_t> key_valid) {
  check(qkv.ndim() == 2 && qkv.dim(0) == batch * length && qkv.dim(1) % (3 * heads) == 0,
        "attention input " + shape_str(qkv.shape()));
  if (mask.length != length) {
    throw ShapeError("mask/sequence mismatch: mask " + std::to_string(mask.length) + " vs sequence " +
                     std::to_string(length));
  }
  check(key_valid.empty() || key_valid.size() == batch * length, "attention key_valid");
  const std::size_t d = qkv.dim(1) / 3, dh = d / heads, L = length;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

  // Probabilities for every (batch, head), kept for the backward pass.
  auto probs = std::make_shared<std::vector<double>>(batch * heads * L * L, 0.0);
  std::vector<double> out(batch * L * d, 0.0);
  RMat scores(L, L);
  const double* base = qkv.value().data();
  for (std::size_t b = 0; b < batch; ++b) {
    const std::uint8_t* valid = key_valid.empty() ? nullptr : key_valid.data() + b * L;
    for (std::size_t h = 0; h < heads; ++h) {
      CStrided q(base + b * L * 3 * d + h * dh, L, dh, Eigen::OuterStride<>(3 * d));
      CStrided k(base + b * L * 3 * d + d + h * dh, L, dh, Eigen::OuterStride<>(3 * d));
      CStrided v(base + b * L * 3 * d + 2 * d + h * dh, L, dh, Eigen::OuterStride<>(3 * d));
      scores.noalias() = q * k.transpose();
      MapM p(probs->data() + (b * heads + h) * L * L, L, L);
      for (std::size_t i = 0; i < L; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < L; ++j) {
          if (mask(i, j) && (!valid || valid[j])) mx = std::max(mx, scores(i, j) * sc);
        }
        if (mx == -std::numeric_limits<double>::infinity()) continue;
        double z = 0.0;
        for (std::size_t j = 0; j < L; ++j) {
          if (mask(i, j) && (!valid || valid[j])) {
            const double e = std::exp(scores(i, j) * sc - mx);
            p(i, j) = e;
            z += e;
          }
        }
        for (std::size_t j = 0; j < L; ++j) p(i, j) /= z;
      }
      Strided o(out.data() + b * L * d + h * dh, L, dh, Eigen::OuterStride<>(d));
      o.noalias() = p * v;
    }
  }

  auto qn = qkv.ptr();
  return make_result({batch * L, d}, std::move(out), {qkv}, [qn, probs, batch, heads, L, d, dh, sc](Node& self) {
    auto& gq = qn->ensure_grad();
    const double* base = qn->value.data();
    RMat dp(L, L), ds(L, L);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = b * L * 3 * d + h * dh;
        CStrided q(base + off, L, dh, Eigen::OuterStride<>(3 * d));
        CStrided k(base + off + d, L, dh, Eigen::OuterStride<>(3 * d));
        CStrided v(base + off + 2 * d, L, dh, Eigen::OuterStride<>(3 * d));
        CStrided go(self.grad.data() + b * L * d + h * dh, L, dh, Eigen::OuterStride<>(d));
        CMapM p(probs->data() + (b * heads + h) * L * L, L, L);
        Strided dq(gq.data() + off, L, dh, Eigen::OuterStride<>(3 * d));
        Strided dk(gq.data() + off + d, L, dh, Eigen::OuterStride<>(3 * d));
        Strided dv(gq.data() + off + 2 * d, L, dh, Eigen::OuterStride<>(3 * d));
        dv.noalias() += p.transpose() * go;
        dp.noalias() = go * v.transpose();
        for (std::size_t i = 0; i < L; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < L; ++j) dot += p(i, j) * dp(i, j);
          for (std::size_t j = 0; j < L; ++j) ds(i, j) = p(i, j) * (dp(i, j) - dot) * sc;
        }
        dq.noalias() += ds * k;
        dk.noalias() += ds.transpose() * q;
      }
    }
  });
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids) {
  check(table.ndim() == 2, "gather_rows table " + shape_str(table.shape()));
  const auto v = table.dim(0), d = table.dim(1);
  std::vector<double> out(ids.size() * d);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] >= v) throw ShapeError("index out of range: " + std::to_string(ids[r]) + " >= " + std::to_string(v));
    std::copy_n(table.value().data() + ids[r] * d, d, out.data() + r * d);
  }
  auto tn = table.ptr();
  std::vector<std::size_t> idx(ids.begin(), ids.end());
  return make_result({ids.size(), d}, std::move(out), {table}, [tn, d, idx = std::move(idx)](Node& self) {
    auto& g = tn->ensure_grad();
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t c = 0; c < d; ++c) g[idx[r] * d + c] += self.grad[r * d + c];
  });
}

Tensor mix_rows(const Tensor& table, const RowMix& mix) {
  check(table.ndim() == 2, "mix_rows table " + shape_str(table.shape()));
  const auto v = table.dim(0), d = table.dim(1), n = mix.rows();
  std::vector<double> out(n * d, 0.0);
  const double* tv = table.value().data();
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t k = mix.offsets[r]; k < mix.offsets[r + 1]; ++k) {
      if (mix.index[k] >= v) throw ShapeError("index out of range in mix_rows");
      const double w = mix.weight[k];
      const double* src = tv + mix.index[k] * d;
      for (std::size_t c = 0; c < d; ++c) out[r * d + c] += w * src[c];
    }
  }
  auto tn = table.ptr();
  return make_result({n, d}, std::move(out), {table}, [tn, d, mix](Node& self) {
    auto& g = tn->ensure_grad();
    for (std::size_t r = 0; r + 1 < mix.offsets.size(); ++r) {
      for (std::size_t k = mix.offsets[r]; k < mix.offsets[r + 1]; ++k) {
        const double w = mix.weight[k];
        double* dst = g.data() + mix.index[k] * d;
        for (std::size_t c = 0; c < d; ++c) dst[c] += w * self.grad[r * d + c];
      }
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  check(numel(shape) == x.size(), "reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  std::vector<double> out(x.value().begin(), x.value().end());
  auto xn = x.ptr();
  return make_result(std::move(shape), std::move(out), {x}, [xn](Node& self) {
    auto& g = xn->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  const auto rows = rows_of(x), cols = cols_of(x);
  check(begin <= end && end <= rows, "slice_rows");
  std::vector<double> out(x.value().begin() + begin * cols, x.value().begin() + end * cols);
  Shape shape = x.shape();
  shape[0] = end - begin;
  auto xn = x.ptr();
  return make_result(shape, std::move(out), {x}, [xn, begin, cols](Node& self) {
    auto& g = xn->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * cols + i] += self.grad[i];
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  check(!parts.empty(), "concat_rows of nothing");
  const auto cols = cols_of(parts[0]);
  std::size_t rows = 0;
  std::vector<double> out;
  for (const auto& p : parts) {
    check(cols_of(p) == cols, "concat_rows column count");
    rows += rows_of(p);
    out.insert(out.end(), p.value().begin(), p.value().end());
  }
  Shape shape = parts[0].shape();
  shape[0] = rows;
  std::vector<std::shared_ptr<Node>> nodes;
  for (const auto& p : parts) nodes.push_back(p.ptr());
  return make_result(shape, std::move(out), parts, [nodes](Node& self) {
    std::size_t off = 0;
    for (const auto& n : nodes) {
      if (n->requires_grad) {
        auto& g = n->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[off + i];
      }
      off += n->value.size();
    }
  });
}

Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t kernel, std::size_t stride,
              std::size_t pad) {
  check(x.ndim() == 3 && w.ndim() == 2 && w.dim(0) == kernel * x.dim(2) && b.size() == w.dim(1) && stride > 0,
        "conv1d x " + shape_str(x.shape()) + " w " + shape_str(w.shape()));
  const auto m = x.dim(0), len = x.dim(1), cin = x.dim(2), cout = w.dim(1);
  check(len + 2 * pad >= kernel, "conv1d input shorter than kernel");
  const auto lout = (len + 2 * pad - kernel) / stride + 1;
  const auto kc = kernel * cin;
  auto col = std::make_shared<RMat>(RMat::Zero(m * lout, kc));
  const double* xv = x.value().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t o = 0; o < lout; ++o) {
      double* row = col->data() + (i * lout + o) * kc;
      for (std::size_t kk = 0; kk < kernel; ++kk) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(o * stride + kk) - static_cast<std::ptrdiff_t>(pad);
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(len)) continue;
        std::copy_n(xv + (i * len + static_cast<std::size_t>(src)) * cin, cin, row + kk * cin);
      }
    }
  }
  std::vector<double> out(m * lout * cout);
  MapM y(out.data(), m * lout, cout);
  y.noalias() = *col * CMapM(w.value().data(), kc, cout);
  y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.value().data(), cout);
  auto xn = x.ptr(), wn = w.ptr(), bn = b.ptr();
  return make_result({m, lout, cout}, std::move(out), {x, w, b},
                     [xn, wn, bn, col, m, len, cin, cout, lout, kernel, stride, pad, kc](Node& self) {
                       CMapM g(self.grad.data(), m * lout, cout);
                       if (wn->requires_grad) MapM(wn->ensure_grad().data(), kc, cout).noalias() += col->transpose() * g;
                       if (bn->requires_grad) add_column_sums(self.grad.data(), m * lout, cout, bn->ensure_grad().data());
                       if (xn->requires_grad) {
                         RMat dcol = g * CMapM(wn->value.data(), kc, cout).transpose();
                         auto& gx = xn->ensure_grad();
                         for (std::size_t i = 0; i < m; ++i) {
                           for (std::size_t o = 0; o < lout; ++o) {
                             const double* row = dcol.data() + (i * lout + o) * kc;
                             for (std::size_t kk = 0; kk < kernel; ++kk) {
                               const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(o * stride + kk) -
                                                          static_cast<std::ptrdiff_t>(pad);
                               if (src < 0 || src >= static_cast<std::ptrdiff_t>(len)) continue;
                               double* dst = gx.data() + (i * len + static_cast<std::size_t>(src)) * cin;
                               for (std::size_t c = 0; c < cin; ++c) dst[c] += row[kk * cin + c];
                             }
                           }
                         }
                       }
                     });
}

Tensor mean_over_time(const Tensor& x) {
  check(x.ndim() == 3, "mean_over_time " + shape_str(x.shape()));
  const auto m = x.dim(0), len = x.dim(1), c = x.dim(2);
  std::vector<double> out(m * c, 0.0);
  const double inv = 1.0 / static_cast<double>(len);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t t = 0; t < len; ++t)
      for (std::size_t k = 0; k < c; ++k) out[i * c + k] += x.value()[(i * len + t) * c + k] * inv;
  auto xn = x.ptr();
  return make_result({m, c}, std::move(out), {x}, [xn, m, len, c, inv](Node& self) {
    auto& g = xn->ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t t = 0; t < len; ++t)
        for (std::size_t k = 0; k < c; ++k) g[(i * len + t) * c + k] += self.grad[i * c + k] * inv;
  });
}

Tensor weighted_sq_error(const Tensor& pred, std::span<const double> target, std::span<const double> row_weight) {
  check(target.size() == pred.size(), "weighted_sq_error target");
  const auto rows = row_weight.size();
  check(rows > 0 && pred.size() % rows == 0, "weighted_sq_error rows");
  const auto cols = pred.size() / rows;
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (row_weight[r] == 0.0) continue;
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double e = pred.value()[r * cols + c] - target[r * cols + c];
      s += e * e;
    }
    total += row_weight[r] * s;
  }
  auto pn = pred.ptr();
  std::vector<double> tgt(target.begin(), target.end()), rw(row_weight.begin(), row_weight.end());
  return make_result({1}, {total}, {pred}, [pn, rows, cols, tgt = std::move(tgt), rw = std::move(rw)](Node& self) {
    auto& g = pn->ensure_grad();
    const double up = self.grad[0];
    for (std::size_t r = 0; r < rows; ++r) {
      if (rw[r] == 0.0) continue;
      for (std::size_t c = 0; c < cols; ++c)
        g[r * cols + c] += up * 2.0 * rw[r] * (pn->value[r * cols + c] - tgt[r * cols + c]);
    }
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets, std::span<const double> weight,
                     std::size_t lo, std::size_t hi) {
  check(logits.ndim() == 2 && targets.size() == logits.dim(0) && weight.size() == targets.size(),
        "cross_entropy " + shape_str(logits.shape()));
  const auto n = logits.dim(0), v = logits.dim(1);
  check(lo < hi && hi <= v, "cross_entropy vocabulary range");
  auto probs = std::make_shared<std::vector<double>>(n * (hi - lo), 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (weight[i] == 0.0) continue;
    if (targets[i] < lo || targets[i] >= hi) throw ShapeError("target outside vocabulary range");
    const double* z = logits.value().data() + i * v;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = lo; j < hi; ++j) mx = std::max(mx, z[j]);
    double s = 0.0;
    for (std::size_t j = lo; j < hi; ++j) s += std::exp(z[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = lo; j < hi; ++j) (*probs)[i * (hi - lo) + (j - lo)] = std::exp(z[j] - lse);
    total += weight[i] * (lse - z[targets[i]]);
  }
  auto ln = logits.ptr();
  std::vector<std::size_t> tg(targets.begin(), targets.end());
  std::vector<double> w(weight.begin(), weight.end());
  return make_result({1}, {total}, {logits}, [ln, probs, n, v, lo, hi, tg = std::move(tg), w = std::move(w)](Node& self) {
    auto& g = ln->ensure_grad();
    const double up = self.grad[0];
    for (std::size_t i = 0; i < n; ++i) {
      if (w[i] == 0.0) continue;
      for (std::size_t j = lo; j < hi; ++j) {
        const double p = (*probs)[i * (hi - lo) + (j - lo)];
        g[i * v + j] += up * w[i] * (p - (j == tg[i] ? 1.0 : 0.0));
      }
    }
  });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double e : x.value()) s += e;
  auto xn = x.ptr();
  return make_result({1}, {s}, {x}, [xn](Node& self) {
    auto& g = xn->ensure_grad();
    for (auto& e : g) e += self.grad[0];
  });
}

Tensor dot_const(const Tensor& x, std::span<const double> w) {
  check(w.size() == x.size(), "dot_const");
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * x.value()[i];
  auto xn = x.ptr();
  std::vector<double> wv(w.begin(), w.end());
  return make_result({1}, {s}, {x}, [xn, wv = std::move(wv)](Node& self) {
    auto& g = xn->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * wv[i];
  });
}

Tensor detach(const Tensor& x) {
  return Tensor::constant(x.shape(), std::vector<double>(x.value().begin(), x.value().end()));
}

Tensor grad_reverse(const Tensor& x, double lambda) {
  std::vector<double> out(x.value().begin(), x.value().end());
  auto xn = x.ptr();
  return make_result(x.shape(), std::move(out), {x}, [xn, lambda](Node& self) {
    auto& g = xn->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += -lambda * self.grad[i];
  });
}

}  // namespace thdbar::nn
