#include <gtest/gtest.h>

#include <cmath>

#include "ssmctr/models.hpp"
#include "ssmctr/train.hpp"
#include "support/toy.hpp"

using namespace ssmctr;
using ssmctr::testing::max_relative_error;
using ssmctr::testing::random_tensor;
using ssmctr::testing::small_model;

namespace {

ExampleBatch whole_batch(const Dataset& ds) {
  std::vector<std::size_t> rows(ds.size());
  std::iota(rows.begin(), rows.end(), 0);
  ExampleBatch batch;
  Batcher::gather(ds, rows, batch);
  return batch;
}

std::vector<double> logits_of(CtrModel& model, const ExampleBatch& batch,
                              Phase phase = Phase::Full) {
  Trace t(false);
  return t.value(model.forward(t, batch, phase)).values();
}

double batch_loss(CtrModel& model, const ExampleBatch& batch, Phase phase) {
  Trace t(false);
  return t.value(ops::bce_with_logits(t, model.forward(t, batch, phase), batch.labels))[0];
}

// Full-model gradient check: every trainable entry against central
// differences of the batch loss.
double model_gradient_error(CtrModel& model, const ExampleBatch& batch, Phase phase) {
  auto params = model.parameters(phase);
  for (auto& p : params) p.tensor->drop_grad();
  {
    Trace t;
    t.backward(ops::bce_with_logits(t, model.forward(t, batch, phase), batch.labels));
  }
  double worst = 0.0;
  for (auto& p : params) {
    if (!p.trainable) continue;
    std::vector<double> analytic(p.tensor->size(), 0.0);
    if (p.tensor->has_grad()) analytic.assign(p.tensor->grad().begin(), p.tensor->grad().end());
    const double err = max_relative_error(*p.tensor, analytic,
                                          [&] { return batch_loss(model, batch, phase); });
    EXPECT_LT(err, 1e-3) << p.name;
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace

TEST(ModelKind, NamesRoundTrip) {
  for (ModelKind k : kAllModelKinds) EXPECT_EQ(parse_model_kind(name_of(k)), k);
  EXPECT_THROW(parse_model_kind("FM"), ConfigError);
  EXPECT_TRUE(has_wide(ModelKind::LR));
  EXPECT_FALSE(has_deep(ModelKind::LR));
  EXPECT_FALSE(has_wide(ModelKind::Deep));
  EXPECT_TRUE(has_ssm(ModelKind::WideDeepSSM));
}

TEST(WideForward, BiasAndActiveIndices) {
  EmbeddingTable table(10, 1);
  Tensor bias = Tensor::vector({0.75});
  std::vector<IndexList> sparse = {{1, 4}, {}};
  Trace t(false);
  Var num = t.constant(Tensor({2, 1}));
  EXPECT_EQ(t.value(wide_forward(t, sparse, num, table, nullptr, bias)).values(),
            (std::vector<double>{0.75, 0.75}));
  table.weights.at(4, 0) = 2.0;
  bias[0] = 0.0;
  std::vector<IndexList> one = {{4}};
  Var num1 = t.constant(Tensor({1, 1}));
  EXPECT_EQ(t.value(wide_forward(t, one, num1, table, nullptr, bias))[0], 2.0);
}

TEST(WideForward, SparseEqualsDenseOneHot) {
  const auto schema = ssmctr::testing::five_field_schema(6);
  const Dataset ds = ssmctr::testing::random_dataset(schema, 12, 3);
  CtrModel model(schema, small_model(ModelKind::LR), 1);
  Rng rng(4);
  for (auto& p : model.parameters()) {
    for (double& v : p.tensor->data()) v = rng.uniform(-1, 1);
  }
  const auto batch = whole_batch(ds);
  const auto sparse = logits_of(model, batch);
  // Dense oracle: one-hot matrix over the concatenated bucket space.
  const std::size_t D = schema.sparse_dimension();
  auto params = model.parameters();
  const Tensor& w = *params[0].tensor;
  const Tensor& wn = *params[1].tensor;
  const Tensor& b = *params[2].tensor;
  ASSERT_EQ(w.dim(0), D);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    std::vector<double> x(D, 0.0);
    std::size_t offset = 0;
    for (std::size_t k = 0; k < 5; ++k) {
      for (auto idx : ds.indices(i, k)) x[offset + idx] = 1.0;
      offset += 6;
    }
    double z = b[0] + wn[0] * ds.numeric(i, 0);
    for (std::size_t j = 0; j < D; ++j) z += x[j] * w[j];
    EXPECT_NEAR(sparse[i], z, 1e-12);
  }
}

TEST(DeepForward, IdentityAndBiasChain) {
  std::vector<DenseLayer> layers = {
      {Tensor::matrix(2, 2, {1, 0, 0, 1}), Tensor({2})},
      {Tensor::matrix(2, 1, {1, 1}), Tensor({1})}};
  Trace t(false);
  Var x = t.constant(Tensor::matrix(1, 2, {3, 4}));
  EXPECT_EQ(t.value(deep_forward(t, x, layers))[0], 7.0);
  layers[0].bias = Tensor::vector({0.5, -2});
  layers[1].bias = Tensor::vector({0.25});
  Var zero = t.constant(Tensor({1, 2}));
  EXPECT_EQ(t.value(deep_forward(t, zero, layers))[0], 0.75);  // relu(-2) drops out
  Var wrong = t.constant(Tensor({1, 3}));
  EXPECT_THROW(deep_forward(t, wrong, layers), DimensionError);
}

TEST(DeepForward, GradientOnSmallStack) {
  Rng rng(5);
  std::vector<DenseLayer> layers = {{random_tensor({4, 8}, rng), random_tensor({8}, rng)},
                                    {random_tensor({8, 1}, rng), random_tensor({1}, rng)}};
  Tensor x = random_tensor({3, 4}, rng);
  const std::vector<double> y = {1, 0, 1};
  auto loss = [&](bool grad) {
    Trace t(grad);
    Var z = deep_forward(t, t.view(x), layers);
    Var l = ops::bce_with_logits(t, z, y);
    if (grad) t.backward(l);
    return t.value(l)[0];
  };
  loss(true);
  for (auto& l : layers) {
    for (Tensor* p : {&l.weight, &l.bias}) {
      std::vector<double> analytic(p->grad().begin(), p->grad().end());
      EXPECT_LT(max_relative_error(*p, analytic, [&] { return loss(false); }), 1e-4);
    }
  }
}

TEST(BuildDeepInput, Widths) {
  Trace t(false);
  std::vector<Var> emb;
  for (int f = 0; f < 5; ++f) emb.push_back(t.constant(Tensor({1, 8})));
  Var num = t.constant(Tensor({1, 2}));
  EXPECT_EQ(t.value(build_deep_input(t, emb, num, std::nullopt)).dim(1), 42u);
  Var u = t.constant(Tensor({1, 10150}));
  EXPECT_EQ(t.value(build_deep_input(t, emb, num, u)).dim(1), 10192u);
}

TEST(BuildDeepInput, FieldOrderPermutesValuesOnly) {
  Trace t(false);
  Var a = t.constant(Tensor::matrix(1, 2, {1, 2}));
  Var b = t.constant(Tensor::matrix(1, 2, {3, 4}));
  std::vector<Var> ab = {a, b}, ba = {b, a};
  auto x = t.value(build_deep_input(t, ab, std::nullopt, std::nullopt)).values();
  auto y = t.value(build_deep_input(t, ba, std::nullopt, std::nullopt)).values();
  EXPECT_NE(x, y);
  std::sort(x.begin(), x.end());
  std::sort(y.begin(), y.end());
  EXPECT_EQ(x, y);
}

TEST(CombineLogits, ValuesAndSymmetry) {
  EXPECT_EQ(combine_logits(0.0, 0.0, ModelKind::WideDeep), 0.5);
  EXPECT_EQ(combine_logits(1.5, std::nullopt, ModelKind::LR), stable_sigmoid(1.5));
  EXPECT_EQ(combine_logits(1.5, 100.0, ModelKind::LR), stable_sigmoid(1.5));
  EXPECT_NEAR(combine_logits(1.0, 1.0, ModelKind::WideDeep), 0.8807970779778823, 1e-15);
  EXPECT_THROW(combine_logits(std::nullopt, 1.0, ModelKind::WideDeep), ConfigError);
  Rng rng(6);
  for (int i = 0; i < 1000; ++i) {
    const double a = rng.uniform(-30, 30), b = rng.uniform(-30, 30);
    ASSERT_NEAR(combine_logits(-a, -b, ModelKind::WideDeepSSM),
                1.0 - combine_logits(a, b, ModelKind::WideDeepSSM), 1e-12);
  }
}

TEST(CrossEntropy, LimitsAndStability) {
  const std::vector<double> perfect_z = {40, -40}, perfect_y = {1, 0};
  EXPECT_LT(cross_entropy_loss(perfect_z, perfect_y), 1e-15);
  const std::vector<double> half_z = {0, 0, 0}, half_y = {1, 0, 1};
  EXPECT_NEAR(cross_entropy_loss(half_z, half_y), std::log(2.0), 1e-15);
  const std::vector<double> z = {40}, y = {0};
  EXPECT_NEAR(cross_entropy_loss(z, y), 40.0, 1e-12);
  const std::vector<double> bad = {2};
  EXPECT_THROW(cross_entropy_loss(z, bad), DomainError);
}

TEST(CtrModel, LayerDimensionsChain) {
  const auto schema = ssmctr::testing::five_field_schema();
  for (ModelKind kind : kAllModelKinds) {
    CtrModel m(schema, small_model(kind), 1);
    if (!has_deep(kind)) {
      EXPECT_TRUE(m.deep_layers().empty());
      continue;
    }
    std::size_t in = m.deep_input_width();
    EXPECT_EQ(in, 5 * 4 + 1 + (has_ssm(kind) ? m.layout().total : 0));
    for (auto& l : m.deep_layers()) {
      EXPECT_EQ(l.weight.dim(0), in);
      in = l.weight.dim(1);
    }
    EXPECT_EQ(in, 1u);
  }
}

TEST(CtrModel, SsmNeedsUserAndItemFields) {
  const FeatureSchema only_user({ssmctr::testing::categorical("u", Side::User, 4),
                                 ssmctr::testing::categorical("c", Side::Context, 4)});
  ModelConfig mc = small_model(ModelKind::WideDeepSSM);
  mc.ssm.ranks = {2};
  EXPECT_THROW(CtrModel(only_user, mc, 1), ConfigError);
  mc.ssm.mode = PermutationMode::CrossOnly;
  const FeatureSchema two({ssmctr::testing::categorical("u", Side::User, 4),
                           ssmctr::testing::categorical("u2", Side::User, 4),
                           ssmctr::testing::categorical("c", Side::Context, 4)});
  EXPECT_THROW(CtrModel(two, mc, 1), ConfigError);
}

TEST(CtrModel, EndToEndGradientForEveryKind) {
  const auto schema = ssmctr::testing::five_field_schema(7);
  const Dataset ds = ssmctr::testing::random_dataset(schema, 20, 7);
  const auto batch = whole_batch(ds);
  for (ModelKind kind : kAllModelKinds) {
    CtrModel model(schema, small_model(kind), 11);
    // Non-zero wide weights so the wide branch has non-trivial gradients.
    Rng rng(12);
    for (auto& p : model.parameters()) {
      if (p.name.rfind("wide/", 0) == 0) {
        for (double& v : p.tensor->data()) v = rng.uniform(-0.5, 0.5);
      }
    }
    SCOPED_TRACE(std::string(name_of(kind)));
    EXPECT_LT(model_gradient_error(model, batch, Phase::Full), 1e-3);
    if (has_ssm(kind)) EXPECT_LT(model_gradient_error(model, batch, Phase::Pretrain), 1e-3);
  }
}

TEST(CtrModel, SsmNestsWideDeep) {
  const auto schema = ssmctr::testing::five_field_schema(7);
  const Dataset ds = ssmctr::testing::random_dataset(schema, 30, 8);
  const auto batch = whole_batch(ds);
  CtrModel base(schema, small_model(ModelKind::WideDeep), 21);
  CtrModel ssm(schema, small_model(ModelKind::WideDeepSSM), 21);
  auto src = base.parameters();
  auto dst = ssm.parameters();
  for (auto& d : dst) {
    auto it = std::find_if(src.begin(), src.end(), [&](const ParamRef& s) { return s.name == d.name; });
    if (it == src.end()) {
      if (d.name == "ssm/head_weight" || d.name == "ssm/head_bias") {
        for (double& v : d.tensor->data()) v = 0.0;
      }
      continue;
    }
    if (d.name == "deep/0/weight") {
      // Copy the shared rows; the U rows (last) are zeroed.
      const std::size_t shared = it->tensor->dim(0), out = it->tensor->dim(1);
      for (double& v : d.tensor->data()) v = 0.0;
      for (std::size_t r = 0; r < shared; ++r) {
        for (std::size_t c = 0; c < out; ++c) d.tensor->at(r, c) = it->tensor->at(r, c);
      }
    } else {
      *d.tensor = *it->tensor;
    }
  }
  EXPECT_EQ(logits_of(ssm, batch), logits_of(base, batch));
}

TEST(CtrModel, LossFallsOnSeparableToyForEveryKind) {
  const auto schema = ssmctr::testing::interaction_schema(10);
  const Dataset ds = ssmctr::testing::separable_dataset(schema, 100, 9);
  for (ModelKind kind : kAllModelKinds) {
    TrainConfig tc;
    tc.batch_size = 100;
    tc.pretrain_epochs = 0;
    tc.finetune_epochs = 200;
    tc.eval_every = 1;
    tc.optimizer.lr = 0.05;
    ModelConfig mc = small_model(kind);
    mc.ssm.ranks = {2};
    TrainResult r = train(schema, mc, ds, tc);
    ASSERT_EQ(r.log.size(), 200u);
    const double first = r.log.front().train_loss, last = r.log.back().train_loss;
    EXPECT_LT(last, 0.1 * first) << name_of(kind) << " " << first << " -> " << last;
  }
}
