#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ssmctr/ops.hpp"
#include "ssmctr/random.hpp"
#include "ssmctr/trace.hpp"

namespace ssmctr {

/// One embedding row per hash bucket.
struct EmbeddingTable {
  Tensor weights;
  TouchedRows touched;

  EmbeddingTable() = default;
  EmbeddingTable(std::size_t rows, std::size_t dim) : weights({rows, dim}) {
    touched.reset(rows);
  }

  std::size_t rows() const { return weights.dim(0); }
  std::size_t dim() const { return weights.dim(1); }

  /// Uniform in [-1/sqrt(d), 1/sqrt(d)].
  void init_uniform(Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(dim()));
    for (double& w : weights.data()) w = rng.uniform(-bound, bound);
  }

  /// Sum-pooled lookup for a batch, [B, dim].
  Var lookup(Trace& t, std::span<const IndexList> batch, bool trainable = true) {
    return ops::gather_sum(t, weights, batch, trainable, &touched);
  }
};

/// Single-example embedding: one row for a single index, the elementwise sum
/// for several, zeros for none.
inline Tensor field_embedding(const EmbeddingTable& table,
                              std::span<const std::uint32_t> indices) {
  Tensor out({table.dim()});
  for (auto r : indices) {
    if (r >= table.rows()) {
      throw std::out_of_range("embedding lookup: index " + std::to_string(r) +
                              " >= rows " + std::to_string(table.rows()));
    }
    for (std::size_t j = 0; j < table.dim(); ++j) out[j] += table.weights.at(r, j);
  }
  return out;
}

inline std::uint64_t binomial(std::uint64_t n, std::uint64_t k) {
  if (k > n) return 0;
  k = std::min(k, n - k);
  std::uint64_t c = 1;
  for (std::uint64_t i = 1; i <= k; ++i) c = c * (n - k + i) / i;
  return c;
}

/// Number of size-m field subsets holding at least one of n1 user fields and
/// one of n2 item fields: sum_{j=1}^{m-1} C(n1, j) C(n2, m-j).
inline std::uint64_t count_cross_combinations(std::uint64_t n1, std::uint64_t n2,
                                              std::uint64_t m) {
  if (m < 2) throw DomainError("permutation rank must be >= 2");
  if (n1 < 1 || n2 < 1) throw DomainError("need at least one user and one item field");
  if (m > n1 + n2) throw DomainError("permutation rank exceeds field count");
  std::uint64_t total = 0;
  for (std::uint64_t j = 1; j < m; ++j) total += binomial(n1, j) * binomial(n2, m - j);
  return total;
}

/// Cumulative count over ranks 2..r.
inline std::uint64_t cumulative_cross_combinations(std::uint64_t n1, std::uint64_t n2,
                                                   std::uint64_t r) {
  std::uint64_t total = 0;
  for (std::uint64_t m = 2; m <= r; ++m) total += count_cross_combinations(n1, n2, m);
  return total;
}

enum class PermutationMode { CrossOnly, All };

/// Field-index tuples over n1 user fields (indices [0, n1)) followed by n2
/// item fields. Ranks are visited in the given order; tuples within a rank
/// are lexicographic.
inline std::vector<std::vector<std::size_t>> enumerate_sequences(
    std::size_t n1, std::size_t n2, std::span<const int> ranks, PermutationMode mode) {
  const std::size_t n = n1 + n2;
  std::vector<std::vector<std::size_t>> out;
  for (int rank : ranks) {
    if (rank < 2) throw DomainError("permutation rank must be >= 2");
    const auto m = static_cast<std::size_t>(rank);
    if (m > n) {
      throw DomainError("permutation rank " + std::to_string(rank) + " exceeds " +
                        std::to_string(n) + " fields");
    }
    std::vector<std::size_t> combo(m);
    for (std::size_t i = 0; i < m; ++i) combo[i] = i;
    while (true) {
      const bool has_user = combo.front() < n1;
      const bool has_item = combo.back() >= n1;
      if (mode == PermutationMode::All || (has_user && has_item)) out.push_back(combo);
      std::size_t i = m;
      while (i > 0 && combo[i - 1] == n - m + i - 1) --i;
      if (i == 0) break;
      ++combo[i - 1];
      for (std::size_t j = i; j < m; ++j) combo[j] = combo[j - 1] + 1;
    }
  }
  return out;
}

/// Fixed +-1 convolution kernels, one row per kernel.
struct KernelSet {
  Tensor rank2;  // [2,2]
  Tensor rank3;  // [3,3]

  static KernelSet standard() {
    KernelSet k{Tensor::matrix(2, 2, {1, -1, 1, 1}),
                Tensor::matrix(3, 3, {-1, 1, 1, 1, -1, 1, 1, 1, -1})};
    k.check();
    return k;
  }

  const Tensor& for_rank(int rank) const {
    if (rank == 2) return rank2;
    if (rank == 3) return rank3;
    throw DomainError("no kernels for rank " + std::to_string(rank));
  }
  Tensor& for_rank(int rank) {
    return const_cast<Tensor&>(std::as_const(*this).for_rank(rank));
  }

  /// Rank-2 rows must be orthogonal and all entries +-1.
  void check() const {
    for (const Tensor* t : {&rank2, &rank3}) {
      for (double v : t->data()) {
        if (v != 1.0 && v != -1.0) throw DomainError("kernel entries must be +-1");
      }
    }
    const double dot = rank2.at(0, 0) * rank2.at(1, 0) + rank2.at(0, 1) * rank2.at(1, 1);
    if (dot != 0.0) throw DomainError("rank-2 kernels are not orthogonal");
  }
};

struct PoolSpec {
  std::size_t window = 3;
  std::size_t stride = 1;
  PoolKind kind = PoolKind::Max;
  friend bool operator==(const PoolSpec&, const PoolSpec&) = default;
};

struct SsmConfig {
  std::size_t dim = 16;
  std::vector<int> ranks = {2, 3};
  PermutationMode mode = PermutationMode::All;
  bool linear_kernels = true;
  bool product = true;  // elementwise-product kernel for every rank
  std::vector<PoolSpec> poolings = {{3, 1, PoolKind::Max},
                                    {7, 3, PoolKind::Max},
                                    {13, 6, PoolKind::Max}};
  bool trainable_kernels = false;

  void validate() const {
    if (dim == 0) throw DomainError("ssm: dim must be positive");
    if (ranks.empty()) throw DomainError("ssm: no permutation ranks");
    for (std::size_t i = 0; i < ranks.size(); ++i) {
      if (ranks[i] != 2 && ranks[i] != 3) throw DomainError("ssm: ranks must be 2 or 3");
      for (std::size_t j = 0; j < i; ++j) {
        if (ranks[j] == ranks[i]) throw DomainError("ssm: duplicate rank");
      }
    }
    if (!linear_kernels && !product) throw DomainError("ssm: no kernels enabled");
    if (poolings.empty()) throw DomainError("ssm: no pooling specs");
    for (const auto& p : poolings) {
      if (p.window == 0 || p.window > dim) {
        throw DomainError("ssm: pooling window " + std::to_string(p.window) +
                          " exceeds embedding dim " + std::to_string(dim));
      }
      if (p.stride == 0) throw DomainError("ssm: pooling stride must be >= 1");
    }
  }

  /// Convolution outputs produced per sequence of the given rank.
  std::size_t kernels_for_rank(int rank) const {
    return (linear_kernels ? static_cast<std::size_t>(rank) : 0) + (product ? 1 : 0);
  }
};

struct FlattenLayout {
  std::vector<std::vector<std::size_t>> sequences;
  std::size_t sequence_count = 0;
  std::size_t conv_output_count = 0;
  std::vector<std::size_t> pooled_lengths;  // per pooling spec
  std::size_t total = 0;
};

inline FlattenLayout make_layout(const SsmConfig& config, std::size_t n_user,
                                 std::size_t n_item) {
  config.validate();
  FlattenLayout layout;
  layout.sequences = enumerate_sequences(n_user, n_item, config.ranks, config.mode);
  layout.sequence_count = layout.sequences.size();
  for (const auto& seq : layout.sequences) {
    layout.conv_output_count += config.kernels_for_rank(static_cast<int>(seq.size()));
  }
  for (const auto& p : config.poolings) {
    const std::size_t len = pooled_length(config.dim, p.window, p.stride);
    layout.pooled_lengths.push_back(len);
    layout.total += len * layout.conv_output_count;
  }
  return layout;
}

/// sum_i kernel[row, i] * e_i for a sequence of same-shape vectors.
inline Var base_conv(Trace& t, std::span<const Var> sequence, Var kernels,
                     std::size_t row) {
  const Tensor& K = t.value(kernels);
  if (K.rank() != 2 || K.dim(1) != sequence.size() || row >= K.dim(0)) {
    throw DimensionError("base_conv: kernel shape " + to_string(K.shape()) +
                         " does not fit a sequence of length " +
                         std::to_string(sequence.size()));
  }
  return ops::weighted_sum(t, sequence, kernels, row * K.dim(1));
}

inline Tensor base_conv(std::span<const Tensor> sequence, std::span<const double> kernel) {
  if (kernel.size() != sequence.size()) {
    throw DimensionError("base_conv: kernel length " + std::to_string(kernel.size()) +
                         " vs sequence length " + std::to_string(sequence.size()));
  }
  Trace t(false);
  std::vector<Var> vars;
  for (const auto& e : sequence) vars.push_back(t.view(e));
  Var k = t.constant(Tensor::matrix(1, kernel.size(), {kernel.begin(), kernel.end()}));
  return t.value(base_conv(t, vars, k, 0));
}

/// Elementwise product of a rank-2 or rank-3 sequence.
inline Var special_conv(Trace& t, std::span<const Var> sequence) {
  if (sequence.size() != 2 && sequence.size() != 3) {
    throw DimensionError("special_conv: sequence length must be 2 or 3, got " +
                         std::to_string(sequence.size()));
  }
  return ops::product(t, sequence);
}

inline Tensor special_conv(std::span<const Tensor> sequence) {
  Trace t(false);
  std::vector<Var> vars;
  for (const auto& e : sequence) vars.push_back(t.view(e));
  return t.value(special_conv(t, vars));
}

/// Permutes field embeddings ([B, d] each; user fields first), applies every
/// kernel to every sequence, pools each convolution output at every scale and
/// flattens pooling-spec-major, conv-output-minor into U [B, layout.total].
inline Var ssm_forward(Trace& t, std::span<const Var> embeddings, const SsmConfig& config,
                       const FlattenLayout& layout, Var kernels2, Var kernels3) {
  std::vector<Var> conv_outputs;
  conv_outputs.reserve(layout.conv_output_count);
  std::vector<Var> seq;
  for (const auto& tuple : layout.sequences) {
    seq.clear();
    for (auto f : tuple) {
      if (f >= embeddings.size()) throw DimensionError("ssm_forward: missing embedding");
      seq.push_back(embeddings[f]);
    }
    if (config.linear_kernels) {
      const Var k = tuple.size() == 2 ? kernels2 : kernels3;
      for (std::size_t row = 0; row < tuple.size(); ++row) {
        conv_outputs.push_back(base_conv(t, seq, k, row));
      }
    }
    if (config.product) conv_outputs.push_back(special_conv(t, seq));
  }
  std::vector<Var> pooled;
  pooled.reserve(conv_outputs.size() * config.poolings.size());
  for (const auto& p : config.poolings) {
    for (Var c : conv_outputs) {
      pooled.push_back(ops::window_pool(t, c, p.window, p.stride, p.kind));
    }
  }
  return ops::concat(t, pooled, t.value(pooled.front()).rank() - 1);
}

struct SsmResult {
  Tensor flatten;
  FlattenLayout layout;
};

/// Single-example forward over per-field vectors of length config.dim.
inline SsmResult ssm_forward(std::span<const Tensor> embeddings, std::size_t n_user,
                             const SsmConfig& config,
                             const KernelSet& kernels = KernelSet::standard()) {
  if (n_user > embeddings.size()) throw DimensionError("ssm_forward: n_user > fields");
  for (const auto& e : embeddings) {
    if (e.shape() != Shape{config.dim}) {
      throw DimensionError("ssm_forward: embedding shape " + to_string(e.shape()) +
                           " != [" + std::to_string(config.dim) + "]");
    }
  }
  SsmResult r{Tensor(), make_layout(config, n_user, embeddings.size() - n_user)};
  Trace t(false);
  std::vector<Var> vars;
  for (const auto& e : embeddings) vars.push_back(t.view(e));
  Var u = ssm_forward(t, vars, config, r.layout, t.view(kernels.rank2), t.view(kernels.rank3));
  r.flatten = t.value(u);
  return r;
}

/// Logistic-regression head on U: U w + b, [B, 1].
inline Var ssm_pretrain_logit(Trace& t, Var flatten, Var head_weights, Var head_bias) {
  const Tensor& U = t.value(flatten);
  const Tensor& w = t.value(head_weights);
  if (w.rank() != 2 || w.dim(1) != 1 || U.shape().back() != w.dim(0)) {
    throw DimensionError("ssm head: weights " + to_string(w.shape()) +
                         " do not match flatten " + to_string(U.shape()));
  }
  return ops::add_bias(t, ops::matmul(t, flatten, head_weights), head_bias);
}

}  // namespace ssmctr
