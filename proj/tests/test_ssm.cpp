#include <gtest/gtest.h>

#include <set>

#include "ssmctr/ssm.hpp"
#include "support/toy.hpp"

using namespace ssmctr;
using ssmctr::testing::max_relative_error;
using ssmctr::testing::random_tensor;

namespace {

// Counts size-m subsets of n1 user + n2 item fields by bitmask, keeping
// those with at least one field from each side.
std::uint64_t brute_force_cross(std::size_t n1, std::size_t n2, std::size_t m) {
  const std::size_t n = n1 + n2;
  std::uint64_t count = 0;
  for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
    if (static_cast<std::size_t>(std::popcount(mask)) != m) continue;
    const bool user = (mask & ((1u << n1) - 1)) != 0;
    const bool item = (mask >> n1) != 0;
    if (user && item) ++count;
  }
  return count;
}

SsmConfig reference_config(std::size_t d) {
  SsmConfig c;
  c.dim = d;
  c.ranks = {2, 3};
  c.mode = PermutationMode::All;
  c.poolings = {{3, 1, PoolKind::Max}, {7, 3, PoolKind::Max}, {13, 6, PoolKind::Max}};
  return c;
}

}  // namespace

TEST(FieldEmbedding, RowsSumsAndZero) {
  EmbeddingTable table(4, 3);
  Rng rng(1);
  table.init_uniform(rng);
  const IndexList one = {2}, two = {0, 3}, none = {};
  EXPECT_EQ(field_embedding(table, one).values(),
            (std::vector<double>{table.weights.at(2, 0), table.weights.at(2, 1),
                                 table.weights.at(2, 2)}));
  const Tensor s = field_embedding(table, two);
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_EQ(s[j], table.weights.at(0, j) + table.weights.at(3, j));
  }
  EXPECT_EQ(field_embedding(table, none).values(), (std::vector<double>{0, 0, 0}));
  const IndexList bad = {4};
  EXPECT_THROW(field_embedding(table, bad), std::out_of_range);
}

TEST(FieldEmbedding, InitBoundsScaleWithDim) {
  EmbeddingTable table(50, 16);
  Rng rng(2);
  table.init_uniform(rng);
  for (double v : table.weights.data()) EXPECT_LE(std::abs(v), 0.25);
}

TEST(CrossCount, WorkedValues) {
  EXPECT_EQ(count_cross_combinations(3, 2, 2), 6u);
  EXPECT_EQ(count_cross_combinations(3, 2, 3), 9u);
  EXPECT_EQ(cumulative_cross_combinations(3, 2, 3), 15u);
  EXPECT_THROW(count_cross_combinations(3, 2, 1), DomainError);
  EXPECT_THROW(count_cross_combinations(3, 2, 6), DomainError);
  EXPECT_THROW(count_cross_combinations(0, 2, 2), DomainError);
}

TEST(CrossCount, RankTwoIsProduct) {
  for (std::uint64_t n1 = 1; n1 <= 8; ++n1) {
    for (std::uint64_t n2 = 1; n2 <= 8; ++n2) {
      EXPECT_EQ(count_cross_combinations(n1, n2, 2), n1 * n2);
    }
  }
}

TEST(CrossCount, MatchesBruteForceAndEnumeration) {
  for (std::size_t n1 = 1; n1 <= 6; ++n1) {
    for (std::size_t n2 = 1; n2 <= 6; ++n2) {
      for (std::size_t m = 2; m <= n1 + n2; ++m) {
        const auto oracle = brute_force_cross(n1, n2, m);
        ASSERT_EQ(count_cross_combinations(n1, n2, m), oracle) << n1 << "," << n2 << "," << m;
        const int rank = static_cast<int>(m);
        const auto seqs =
            enumerate_sequences(n1, n2, std::span<const int>(&rank, 1), PermutationMode::CrossOnly);
        ASSERT_EQ(seqs.size(), oracle);
      }
    }
  }
}

TEST(Enumerate, WorkedCountsAndOrder) {
  const std::vector<int> ranks = {2, 3};
  EXPECT_EQ(enumerate_sequences(3, 2, ranks, PermutationMode::All).size(), 20u);
  EXPECT_EQ(enumerate_sequences(3, 2, ranks, PermutationMode::CrossOnly).size(), 15u);
  const std::vector<int> two = {2};
  EXPECT_EQ(enumerate_sequences(1, 1, two, PermutationMode::All).size(), 1u);
  EXPECT_THROW(enumerate_sequences(1, 1, ranks, PermutationMode::All), DomainError);

  const auto seqs = enumerate_sequences(3, 2, ranks, PermutationMode::All);
  std::set<std::vector<std::size_t>> unique(seqs.begin(), seqs.end());
  EXPECT_EQ(unique.size(), seqs.size());
  EXPECT_EQ(seqs.front(), (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(seqs[9], (std::vector<std::size_t>{3, 4}));
  EXPECT_EQ(seqs[10], (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_EQ(seqs.back(), (std::vector<std::size_t>{2, 3, 4}));
  EXPECT_TRUE(std::is_sorted(seqs.begin(), seqs.begin() + 10));
  EXPECT_TRUE(std::is_sorted(seqs.begin() + 10, seqs.end()));
  EXPECT_EQ(enumerate_sequences(3, 2, ranks, PermutationMode::All), seqs);
}

TEST(Kernels, StandardSetIsSignedAndRankTwoOrthogonal) {
  const KernelSet k = KernelSet::standard();
  EXPECT_EQ(k.rank2.values(), (std::vector<double>{1, -1, 1, 1}));
  EXPECT_EQ(k.rank3.values(), (std::vector<double>{-1, 1, 1, 1, -1, 1, 1, 1, -1}));
  EXPECT_NO_THROW(k.check());
  EXPECT_EQ(k.rank2.at(0, 0) * k.rank2.at(1, 0) + k.rank2.at(0, 1) * k.rank2.at(1, 1), 0.0);
  KernelSet bad = k;
  bad.rank2.at(1, 1) = -1;
  EXPECT_THROW(bad.check(), DomainError);
}

TEST(BaseConv, HandValues) {
  const Tensor e = Tensor::vector({0.3, -1.2, 4.0});
  const std::vector<Tensor> same = {e, e};
  const std::vector<double> anti = {1, -1}, sum = {1, 1}, k3 = {-1, 1, 1};
  EXPECT_EQ(base_conv(same, anti).values(), (std::vector<double>{0, 0, 0}));
  const std::vector<Tensor> pair = {Tensor::vector({1, 2}), Tensor::vector({3, 4})};
  EXPECT_EQ(base_conv(pair, sum).values(), (std::vector<double>{4, 6}));
  const std::vector<Tensor> triple = {Tensor::vector({1, 0}), Tensor::vector({0, 1}),
                                      Tensor::vector({1, 1})};
  EXPECT_EQ(base_conv(triple, k3).values(), (std::vector<double>{0, 2}));
  EXPECT_THROW(base_conv(triple, sum), DimensionError);
}

TEST(SpecialConv, ProductValues) {
  const std::vector<Tensor> pair = {Tensor::vector({1, 2, 3}), Tensor::vector({4, 5, 6})};
  const Tensor p = special_conv(pair);
  EXPECT_EQ(p.values(), (std::vector<double>{4, 10, 18}));
  EXPECT_EQ(p[0] + p[1] + p[2], 32.0);
  const std::vector<Tensor> with_ones = {Tensor::vector({2, -3}), Tensor::vector({1, 1}),
                                         Tensor::vector({5, 7})};
  EXPECT_EQ(special_conv(with_ones).values(), (std::vector<double>{10, -21}));
  const std::vector<Tensor> triple = {Tensor::vector({1, 2}), Tensor::vector({3, 4}),
                                      Tensor::vector({5, 6})};
  EXPECT_EQ(special_conv(triple).values(), (std::vector<double>{15, 48}));
  const std::vector<Tensor> single = {Tensor::vector({1, 2})};
  EXPECT_THROW(special_conv(single), DimensionError);
}

TEST(SsmForward, WorkedExampleFlattenDimension) {
  const SsmConfig c = reference_config(100);
  Rng rng(3);
  std::vector<Tensor> emb;
  for (int f = 0; f < 5; ++f) emb.push_back(random_tensor({100}, rng));
  const SsmResult r = ssm_forward(emb, 3, c);
  EXPECT_EQ(r.layout.sequence_count, 20u);
  EXPECT_EQ(r.layout.conv_output_count, 70u);
  EXPECT_EQ(r.layout.pooled_lengths, (std::vector<std::size_t>{98, 32, 15}));
  EXPECT_EQ(r.layout.total, 10150u);
  EXPECT_EQ(r.flatten.size(), 10150u);
}

TEST(SsmForward, TwoFieldHandTrace) {
  SsmConfig c;
  c.dim = 3;
  c.ranks = {2};
  c.product = false;
  c.poolings = {{3, 1, PoolKind::Avg}};
  const std::vector<Tensor> emb = {Tensor::vector({1, 2, 3}), Tensor::vector({4, 5, 9})};
  const SsmResult r = ssm_forward(emb, 1, c);
  EXPECT_EQ(r.layout.total, 2u);
  // [1,-1]: (-3,-3,-6) -> mean -4; [1,1]: (5,7,12) -> mean 8.
  EXPECT_EQ(r.flatten.values(), (std::vector<double>{-4, 8}));
}

TEST(SsmForward, ZeroEmbeddingsGiveZeroFlatten) {
  const SsmConfig c = reference_config(20);
  std::vector<Tensor> emb(5, Tensor({20}));
  const SsmResult r = ssm_forward(emb, 3, c);
  for (double v : r.flatten.data()) EXPECT_EQ(v, 0.0);
}

TEST(SsmForward, OrderIsPoolingMajorConvMinor) {
  SsmConfig c;
  c.dim = 4;
  c.ranks = {2};
  c.poolings = {{4, 4, PoolKind::Avg}, {2, 2, PoolKind::Max}};
  const std::vector<Tensor> emb = {Tensor::vector({1, 2, 3, 4}), Tensor::vector({1, 0, 1, 0})};
  const SsmResult r = ssm_forward(emb, 1, c);
  // Conv outputs: [1,-1] -> (0,2,2,4), [1,1] -> (2,2,4,4), product -> (1,0,3,0).
  EXPECT_EQ(r.flatten.values(),
            (std::vector<double>{2, 3, 1, 2, 4, 2, 4, 1, 3}));
}

TEST(SsmForward, DeterministicAcrossRuns) {
  const SsmConfig c = reference_config(16);
  Rng rng(4);
  std::vector<Tensor> emb;
  for (int f = 0; f < 5; ++f) emb.push_back(random_tensor({16}, rng));
  EXPECT_EQ(ssm_forward(emb, 3, c).flatten, ssm_forward(emb, 3, c).flatten);
}

TEST(FlattenLayout, DimensionLawOverConfigs) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    SsmConfig c;
    c.dim = 4 + rng.below(30);
    c.ranks.clear();
    if (rng.below(2)) c.ranks.push_back(2);
    if (c.ranks.empty() || rng.below(2)) c.ranks.push_back(3);
    c.mode = rng.below(2) ? PermutationMode::All : PermutationMode::CrossOnly;
    c.linear_kernels = rng.below(3) != 0;
    c.product = !c.linear_kernels || rng.below(2);
    c.poolings.clear();
    for (std::size_t p = 0, n = 1 + rng.below(3); p < n; ++p) {
      c.poolings.push_back({1 + rng.below(c.dim), 1 + rng.below(5), PoolKind::Max});
    }
    const std::size_t n1 = 1 + rng.below(4), n2 = 1 + rng.below(4);
    if (n1 + n2 == 2) c.ranks = {2};
    const FlattenLayout l = make_layout(c, n1, n2);
    std::size_t convs = 0;
    for (int rank : c.ranks) {
      const std::size_t seqs =
          c.mode == PermutationMode::All
              ? binomial(n1 + n2, static_cast<std::uint64_t>(rank))
              : count_cross_combinations(n1, n2, static_cast<std::uint64_t>(rank));
      convs += seqs * ((c.linear_kernels ? static_cast<std::size_t>(rank) : 0) + (c.product ? 1 : 0));
    }
    ASSERT_EQ(l.conv_output_count, convs);
    std::size_t total = 0;
    for (const auto& p : c.poolings) total += ((c.dim - p.window) / p.stride + 1) * convs;
    ASSERT_EQ(l.total, total);
  }
}

TEST(SsmConfig, ValidationRejectsBadSettings) {
  SsmConfig c = reference_config(10);
  EXPECT_THROW(c.validate(), DomainError);  // window 13 > d
  c = reference_config(16);
  c.ranks = {4};
  EXPECT_THROW(c.validate(), DomainError);
  c = reference_config(16);
  c.linear_kernels = false;
  c.product = false;
  EXPECT_THROW(c.validate(), DomainError);
}

TEST(SsmForward, DotProductRecovery) {
  SsmConfig c;
  c.dim = 25;
  c.ranks = {2};
  c.linear_kernels = false;
  c.poolings = {{25, 25, PoolKind::Avg}};
  Rng rng(6);
  for (int i = 0; i < 100; ++i) {
    const std::vector<Tensor> pair = {random_tensor({25}, rng), random_tensor({25}, rng)};
    double dot = 0.0;
    for (std::size_t j = 0; j < 25; ++j) dot += pair[0][j] * pair[1][j];
    ASSERT_EQ(ssm_forward(pair, 1, c).flatten[0], dot / 25.0);
  }
}

TEST(PretrainHead, LogitValues) {
  Trace t(false);
  Var u = t.constant(Tensor::matrix(1, 3, {0, 1, 0}));
  Var w0 = t.constant(Tensor({3, 1}));
  Var b0 = t.constant(Tensor({1}));
  EXPECT_EQ(stable_sigmoid(t.value(ssm_pretrain_logit(t, u, w0, b0))[0]), 0.5);
  Var w = t.constant(Tensor::matrix(3, 1, {0.5, -2.5, 7}));
  EXPECT_EQ(t.value(ssm_pretrain_logit(t, u, w, b0))[0], -2.5);
  EXPECT_THROW(ssm_pretrain_logit(t, u, t.constant(Tensor({2, 1})), b0), DimensionError);
}

TEST(PretrainHead, GradientThroughSsmMatchesFiniteDifferences) {
  SsmConfig c;
  c.dim = 4;
  c.ranks = {2, 3};
  c.poolings = {{2, 1, PoolKind::Max}, {4, 4, PoolKind::Avg}};
  const FlattenLayout layout = make_layout(c, 2, 1);
  Rng rng(7);
  std::vector<Tensor> emb;
  for (int f = 0; f < 3; ++f) emb.push_back(random_tensor({2, 4}, rng, -1, 1));
  Tensor w = random_tensor({layout.total, 1}, rng, -1, 1);
  Tensor b = random_tensor({1}, rng, -1, 1);
  const KernelSet k = KernelSet::standard();
  const std::vector<double> labels = {1.0, 0.0};
  auto build = [&](Trace& t, bool grad) {
    std::vector<Var> vars;
    for (auto& e : emb) vars.push_back(grad ? t.parameter(e) : t.view(e));
    Var u = ssm_forward(t, vars, c, layout, t.view(k.rank2), t.view(k.rank3));
    Var z = ssm_pretrain_logit(t, u, grad ? t.parameter(w) : t.view(w),
                               grad ? t.parameter(b) : t.view(b));
    return ops::bce_with_logits(t, z, labels);
  };
  {
    Trace t;
    t.backward(build(t, true));
  }
  auto loss = [&] {
    Trace t(false);
    return t.value(build(t, false))[0];
  };
  for (Tensor* p : {&emb[0], &emb[1], &emb[2], &w, &b}) {
    std::vector<double> analytic(p->grad().begin(), p->grad().end());
    EXPECT_LT(max_relative_error(*p, analytic, loss), 1e-4);
  }
}
