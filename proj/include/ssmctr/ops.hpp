#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ssmctr/tensor.hpp"
#include "ssmctr/trace.hpp"

namespace ssmctr {

using IndexList = std::vector<std::uint32_t>;

enum class PoolKind { Max, Avg };

inline double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// log(1 + exp(x)) without overflow.
inline double softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

inline std::size_t pooled_length(std::size_t length, std::size_t window,
                                 std::size_t stride) {
  if (stride == 0) throw DomainError("pooling stride must be >= 1");
  if (window == 0 || window > length) {
    throw DomainError("invalid pooling: window " + std::to_string(window) +
                      " over length " + std::to_string(length));
  }
  return (length - window) / stride + 1;
}

/// Rows of a table that received gradient since the last optimizer step.
struct TouchedRows {
  std::vector<char> flag;
  std::vector<std::uint32_t> rows;

  void reset(std::size_t row_count) {
    flag.assign(row_count, 0);
    rows.clear();
  }
  void mark(std::uint32_t r) {
    if (!flag[r]) {
      flag[r] = 1;
      rows.push_back(r);
    }
  }
  void clear() {
    for (auto r : rows) flag[r] = 0;
    rows.clear();
  }
};

namespace ops {

namespace detail {

inline bool any_grad(const Trace& t, std::span<const Var> vars) {
  for (Var v : vars) {
    if (t.requires_grad(v)) return true;
  }
  return false;
}

template <typename F>
Var unary(Trace& t, Var x, F&& fn, auto&& dfn) {
  const Tensor& in = t.value(x);
  Tensor out(in.shape());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = fn(in[i]);
  return t.record(std::move(out), t.requires_grad(x),
                  [x, dfn](Trace& tr, std::span<const double> g) {
                    const Tensor& in = tr.value(x);
                    auto gx = tr.grad(x);
                    for (std::size_t i = 0; i < g.size(); ++i) {
                      gx[i] += g[i] * dfn(in[i]);
                    }
                  });
}

}  // namespace detail

/// C = A B for A[m,k], B[k,n].
inline Var matmul(Trace& t, Var a, Var b) {
  const Tensor& A = t.value(a);
  const Tensor& B = t.value(b);
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + to_string(A.shape()) +
                         " x " + to_string(B.shape()));
  }
  const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
  Tensor C({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = C.raw() + i * n;
    const double* arow = A.raw() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = B.raw() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.record(std::move(C), rg,
                  [a, b, m, k, n](Trace& tr, std::span<const double> g) {
    const Tensor& A = tr.value(a);
    const Tensor& B = tr.value(b);
    if (tr.requires_grad(a)) {
      auto ga = tr.grad(a);
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = g.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const double* brow = B.raw() + p * n;
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
          ga[i * k + p] += s;
        }
      }
    }
    if (tr.requires_grad(b)) {
      auto gb = tr.grad(b);
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = g.data() + i * n;
        const double* arow = A.raw() + i * k;
        for (std::size_t p = 0; p < k; ++p) {
          const double av = arow[p];
          if (av == 0.0) continue;
          double* gbrow = gb.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
        }
      }
    }
  });
}

/// x[m,n] + bias[n] broadcast over rows.
inline Var add_bias(Trace& t, Var x, Var bias) {
  const Tensor& X = t.value(x);
  const Tensor& b = t.value(bias);
  if (X.rank() != 2 || b.size() != X.dim(1)) {
    throw DimensionError("add_bias: " + to_string(X.shape()) + " with bias " +
                         to_string(b.shape()));
  }
  const std::size_t m = X.dim(0), n = X.dim(1);
  Tensor out = X;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += b[j];
  }
  const bool rg = t.requires_grad(x) || t.requires_grad(bias);
  return t.record(std::move(out), rg,
                  [x, bias, m, n](Trace& tr, std::span<const double> g) {
    if (tr.requires_grad(x)) {
      auto gx = tr.grad(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (tr.requires_grad(bias)) {
      auto gb = tr.grad(bias);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
      }
    }
  });
}

inline Var relu(Trace& t, Var x) {
  return detail::unary(
      t, x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Var sigmoid(Trace& t, Var x) {
  return detail::unary(t, x, stable_sigmoid, [](double v) {
    const double s = stable_sigmoid(v);
    return s * (1.0 - s);
  });
}

inline Var scale(Trace& t, Var x, double factor) {
  return detail::unary(
      t, x, [factor](double v) { return v * factor; },
      [factor](double) { return factor; });
}

inline Var add(Trace& t, Var a, Var b) {
  require_same_shape(t.value(a), t.value(b), "add");
  Tensor out = t.value(a);
  const Tensor& B = t.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i];
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.record(std::move(out), rg,
                  [a, b](Trace& tr, std::span<const double> g) {
    for (Var v : {a, b}) {
      if (!tr.requires_grad(v)) continue;
      auto gv = tr.grad(v);
      for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
    }
  });
}

inline Var sub(Trace& t, Var a, Var b) {
  require_same_shape(t.value(a), t.value(b), "sub");
  Tensor out = t.value(a);
  const Tensor& B = t.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= B[i];
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.record(std::move(out), rg,
                  [a, b](Trace& tr, std::span<const double> g) {
    if (tr.requires_grad(a)) {
      auto ga = tr.grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (tr.requires_grad(b)) {
      auto gb = tr.grad(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

inline Var mul(Trace& t, Var a, Var b) {
  require_same_shape(t.value(a), t.value(b), "mul");
  Tensor out = t.value(a);
  const Tensor& B = t.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.record(std::move(out), rg,
                  [a, b](Trace& tr, std::span<const double> g) {
    const Tensor& A = tr.value(a);
    const Tensor& B = tr.value(b);
    if (tr.requires_grad(a)) {
      auto ga = tr.grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * B[i];
    }
    if (tr.requires_grad(b)) {
      auto gb = tr.grad(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * A[i];
    }
  });
}

/// Concatenates along `axis`; every other axis must agree.
inline Var concat(Trace& t, std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no parts");
  const Shape& first = t.value(parts[0]).shape();
  if (axis >= first.size()) {
    throw DimensionError("concat: axis " + std::to_string(axis) +
                         " out of range for shape " + to_string(first));
  }
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (Var p : parts) {
    const Shape& s = t.value(p).shape();
    if (s.size() != first.size()) {
      throw DimensionError("concat: rank mismatch " + to_string(first) +
                           " vs " + to_string(s));
    }
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != axis && s[d] != first[d]) {
        throw DimensionError("concat: axis mismatch " + to_string(first) +
                             " vs " + to_string(s));
      }
    }
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
  const std::size_t out_block = out_shape[axis] * inner;

  std::vector<std::size_t> offsets;
  offsets.reserve(parts.size());
  Tensor out(out_shape);
  std::size_t offset = 0;
  for (Var p : parts) {
    const Tensor& src = t.value(p);
    const std::size_t block = src.dim(axis) * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src.raw() + o * block, block,
                  out.raw() + o * out_block + offset);
    }
    offsets.push_back(offset);
    offset += block;
  }
  std::vector<Var> ins(parts.begin(), parts.end());
  return t.record(std::move(out), detail::any_grad(t, parts),
                  [ins, offsets, outer, inner, axis, out_block](
                      Trace& tr, std::span<const double> g) {
    for (std::size_t k = 0; k < ins.size(); ++k) {
      if (!tr.requires_grad(ins[k])) continue;
      const std::size_t block = tr.value(ins[k]).dim(axis) * inner;
      auto gp = tr.grad(ins[k]);
      for (std::size_t o = 0; o < outer; ++o) {
        const double* src = g.data() + o * out_block + offsets[k];
        double* dst = gp.data() + o * block;
        for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
      }
    }
  });
}

inline Var concat(Trace& t, std::initializer_list<Var> parts,
                  std::size_t axis) {
  return concat(t, std::span<const Var>(parts.begin(), parts.size()), axis);
}

/// Sliding-window pooling along the last axis; leading axes are batch.
/// Max-pool gradients go to the first maximal element of each window.
inline Var window_pool(Trace& t, Var x, std::size_t window, std::size_t stride,
                       PoolKind kind) {
  const Tensor& X = t.value(x);
  const std::size_t len = X.shape().back();
  const std::size_t out_len = pooled_length(len, window, stride);
  const std::size_t rows = X.size() / len;
  Shape out_shape = X.shape();
  out_shape.back() = out_len;
  Tensor out(out_shape);
  std::vector<std::uint32_t> argmax;
  if (kind == PoolKind::Max) argmax.resize(rows * out_len);
  const double inv = 1.0 / static_cast<double>(window);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = X.raw() + r * len;
    for (std::size_t i = 0; i < out_len; ++i) {
      const std::size_t start = i * stride;
      if (kind == PoolKind::Max) {
        std::size_t best = start;
        for (std::size_t j = start + 1; j < start + window; ++j) {
          if (src[j] > src[best]) best = j;
        }
        out[r * out_len + i] = src[best];
        argmax[r * out_len + i] = static_cast<std::uint32_t>(best);
      } else {
        double s = 0.0;
        for (std::size_t j = start; j < start + window; ++j) s += src[j];
        out[r * out_len + i] = s / static_cast<double>(window);
      }
    }
  }
  return t.record(std::move(out), t.requires_grad(x),
                  [x, len, out_len, rows, window, stride, kind, inv,
                   argmax = std::move(argmax)](Trace& tr,
                                               std::span<const double> g) {
    auto gx = tr.grad(x);
    for (std::size_t r = 0; r < rows; ++r) {
      double* dst = gx.data() + r * len;
      for (std::size_t i = 0; i < out_len; ++i) {
        const double gi = g[r * out_len + i];
        if (kind == PoolKind::Max) {
          dst[argmax[r * out_len + i]] += gi;
        } else {
          const std::size_t start = i * stride;
          for (std::size_t j = start; j < start + window; ++j) dst[j] += gi * inv;
        }
      }
    }
  });
}

/// sum_i coeffs[offset + i] * parts[i]. The coefficient tensor receives a
/// gradient only when it was recorded as a trainable parameter.
inline Var weighted_sum(Trace& t, std::span<const Var> parts, Var coeffs,
                        std::size_t offset) {
  if (parts.empty()) throw DimensionError("weighted_sum: no parts");
  const Tensor& C = t.value(coeffs);
  if (offset + parts.size() > C.size()) {
    throw DimensionError("weighted_sum: " + std::to_string(parts.size()) +
                         " parts but coefficient row has only " +
                         std::to_string(C.size() - std::min(offset, C.size())) +
                         " entries");
  }
  const Tensor& first = t.value(parts[0]);
  Tensor out(first.shape());
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& p = t.value(parts[k]);
    require_same_shape(first, p, "weighted_sum");
    const double c = C[offset + k];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += c * p[i];
  }
  std::vector<Var> ins(parts.begin(), parts.end());
  const bool rg = detail::any_grad(t, parts) || t.requires_grad(coeffs);
  return t.record(std::move(out), rg,
                  [ins, coeffs, offset](Trace& tr, std::span<const double> g) {
    const Tensor& C = tr.value(coeffs);
    for (std::size_t k = 0; k < ins.size(); ++k) {
      if (tr.requires_grad(ins[k])) {
        auto gp = tr.grad(ins[k]);
        const double c = C[offset + k];
        for (std::size_t i = 0; i < g.size(); ++i) gp[i] += c * g[i];
      }
      if (tr.requires_grad(coeffs)) {
        const Tensor& p = tr.value(ins[k]);
        double s = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) s += g[i] * p[i];
        tr.grad(coeffs)[offset + k] += s;
      }
    }
  });
}

/// Elementwise product of all parts.
inline Var product(Trace& t, std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("product: no parts");
  Tensor out = t.value(parts[0]);
  for (std::size_t k = 1; k < parts.size(); ++k) {
    const Tensor& p = t.value(parts[k]);
    require_same_shape(out, p, "product");
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= p[i];
  }
  std::vector<Var> ins(parts.begin(), parts.end());
  return t.record(std::move(out), detail::any_grad(t, parts),
                  [ins](Trace& tr, std::span<const double> g) {
    for (std::size_t k = 0; k < ins.size(); ++k) {
      if (!tr.requires_grad(ins[k])) continue;
      auto gp = tr.grad(ins[k]);
      for (std::size_t i = 0; i < g.size(); ++i) {
        double others = 1.0;
        for (std::size_t j = 0; j < ins.size(); ++j) {
          if (j != k) others *= tr.value(ins[j])[i];
        }
        gp[i] += g[i] * others;
      }
    }
  });
}

/// Row i of the output is the sum of `table` rows listed in rows[i]; an empty
/// list yields a zero row. Backward scatters into table.grad() and records
/// the touched rows.
inline Var gather_sum(Trace& t, Tensor& table,
                      std::span<const IndexList> rows, bool trainable,
                      TouchedRows* touched) {
  if (table.rank() != 2) {
    throw DimensionError("gather_sum: table must be 2-d, got " +
                         to_string(table.shape()));
  }
  const std::size_t n_rows = table.dim(0), d = table.dim(1);
  if (rows.empty()) throw DimensionError("gather_sum: empty batch");
  Tensor out({rows.size(), d});
  for (std::size_t b = 0; b < rows.size(); ++b) {
    double* dst = out.raw() + b * d;
    for (std::uint32_t r : rows[b]) {
      if (r >= n_rows) {
        throw std::out_of_range("embedding lookup: index " + std::to_string(r) +
                                " >= rows " + std::to_string(n_rows));
      }
      const double* src = table.raw() + static_cast<std::size_t>(r) * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  }
  const bool rg = trainable && t.grad_enabled();
  if (rg) table.enable_grad();
  std::vector<IndexList> idx;
  if (rg) idx.assign(rows.begin(), rows.end());
  return t.record(std::move(out), rg,
                  [&table, touched, d, idx = std::move(idx)](
                      Trace&, std::span<const double> g) {
    auto gt = table.grad();
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const double* src = g.data() + b * d;
      for (std::uint32_t r : idx[b]) {
        double* dst = gt.data() + static_cast<std::size_t>(r) * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
        if (touched) touched->mark(r);
      }
    }
  });
}

inline Var sum(Trace& t, Var x) {
  const Tensor& X = t.value(x);
  double s = 0.0;
  for (double v : X.data()) s += v;
  return t.record(Tensor::vector({s}), t.requires_grad(x),
                  [x](Trace& tr, std::span<const double> g) {
    auto gx = tr.grad(x);
    for (double& v : gx) v += g[0];
  });
}

/// Mean binary cross-entropy computed from logits:
/// softplus(z) - y z, averaged over the batch.
inline Var bce_with_logits(Trace& t, Var logits, std::span<const double> labels) {
  const Tensor& Z = t.value(logits);
  if (Z.size() != labels.size()) {
    throw DimensionError("bce_with_logits: " + std::to_string(Z.size()) +
                         " logits vs " + std::to_string(labels.size()) +
                         " labels");
  }
  for (double y : labels) {
    if (y != 0.0 && y != 1.0) {
      throw DomainError("label outside {0,1}: " + std::to_string(y));
    }
  }
  double total = 0.0;
  for (std::size_t i = 0; i < Z.size(); ++i) {
    total += softplus(Z[i]) - labels[i] * Z[i];
  }
  const double n = static_cast<double>(Z.size());
  std::vector<double> y(labels.begin(), labels.end());
  return t.record(Tensor::vector({total / n}), t.requires_grad(logits),
                  [logits, y = std::move(y), n](Trace& tr,
                                                std::span<const double> g) {
    const Tensor& Z = tr.value(logits);
    auto gz = tr.grad(logits);
    for (std::size_t i = 0; i < y.size(); ++i) {
      gz[i] += g[0] * (stable_sigmoid(Z[i]) - y[i]) / n;
    }
  });
}

}  // namespace ops
}  // namespace ssmctr
