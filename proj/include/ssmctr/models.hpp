#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ssmctr/datasets.hpp"
#include "ssmctr/features.hpp"
#include "ssmctr/ops.hpp"
#include "ssmctr/random.hpp"
#include "ssmctr/ssm.hpp"

namespace ssmctr {

enum class ModelKind { LR, Deep, WideDeep, WideDeepSSM };

inline constexpr ModelKind kAllModelKinds[] = {ModelKind::LR, ModelKind::Deep,
                                               ModelKind::WideDeep, ModelKind::WideDeepSSM};

inline std::string_view name_of(ModelKind k) {
  switch (k) {
    case ModelKind::LR: return "LR";
    case ModelKind::Deep: return "Deep";
    case ModelKind::WideDeep: return "WideDeep";
    case ModelKind::WideDeepSSM: return "WideDeepSSM";
  }
  return "?";
}

inline ModelKind parse_model_kind(std::string_view s) {
  for (ModelKind k : kAllModelKinds) {
    if (name_of(k) == s) return k;
  }
  throw ConfigError("model.kind", "unknown model kind '" + std::string(s) + "'");
}

inline bool has_wide(ModelKind k) { return k != ModelKind::Deep; }
inline bool has_deep(ModelKind k) { return k != ModelKind::LR; }
inline bool has_ssm(ModelKind k) { return k == ModelKind::WideDeepSSM; }

struct ModelConfig {
  ModelKind kind = ModelKind::WideDeep;
  std::size_t embedding_dim = 16;
  std::vector<std::size_t> hidden = {256, 128, 64};
  SsmConfig ssm;  // ssm.dim follows embedding_dim
};

/// Training phase: the SSM logistic head alone, or the full model.
enum class Phase { Pretrain, Full };

inline std::string_view name_of(Phase p) {
  return p == Phase::Pretrain ? "pretrain" : "finetune";
}

/// A named parameter tensor. Tables carry their touched-row set so
/// optimizers can update them sparsely.
struct ParamRef {
  std::string name;
  Tensor* tensor = nullptr;
  TouchedRows* touched = nullptr;
  bool trainable = true;
};

struct DenseLayer {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]
};

/// Wide logits: bias + numeric . w_numeric + sum of weights at active
/// indices. `sparse` holds offset-shifted indices into the wide table.
inline Var wide_forward(Trace& t, std::span<const IndexList> sparse, Var numeric,
                        EmbeddingTable& wide_table, Tensor* wide_numeric, Tensor& bias) {
  Var logit = wide_table.lookup(t, sparse);
  if (wide_numeric) logit = ops::add(t, logit, ops::matmul(t, numeric, t.parameter(*wide_numeric)));
  return ops::add_bias(t, logit, t.parameter(bias));
}

/// ReLU MLP; hidden layers are rectified, the last layer is linear.
inline Var deep_forward(Trace& t, Var input, std::span<DenseLayer> layers) {
  Var a = input;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const Tensor& W = layers[l].weight;
    if (t.value(a).shape().back() != W.dim(0)) {
      throw DimensionError("deep layer " + std::to_string(l) + ": input width " +
                           std::to_string(t.value(a).shape().back()) + " != " +
                           std::to_string(W.dim(0)));
    }
    a = ops::add_bias(t, ops::matmul(t, a, t.parameter(layers[l].weight)),
                      t.parameter(layers[l].bias));
    if (l + 1 < layers.size()) a = ops::relu(t, a);
  }
  return a;
}

/// [e_1, ..., e_n, numeric, U] along the feature axis.
inline Var build_deep_input(Trace& t, std::span<const Var> embeddings,
                            std::optional<Var> numeric, std::optional<Var> flatten) {
  std::vector<Var> parts(embeddings.begin(), embeddings.end());
  if (numeric) parts.push_back(*numeric);
  if (flatten) parts.push_back(*flatten);
  return ops::concat(t, parts, 1);
}

/// sigma(sum of the branches the kind uses).
inline double combine_logits(std::optional<double> wide, std::optional<double> deep,
                             ModelKind kind) {
  if (has_wide(kind) && !wide) throw ConfigError("model", "wide branch missing");
  if (has_deep(kind) && !deep) throw ConfigError("model", "deep branch missing");
  double z = 0.0;
  if (has_wide(kind)) z += *wide;
  if (has_deep(kind)) z += *deep;
  return stable_sigmoid(z);
}

/// Mean negative log-likelihood of labels under sigmoid(logits).
inline double cross_entropy_loss(std::span<const double> logits,
                                 std::span<const double> labels) {
  Trace t(false);
  Var z = t.constant(Tensor::vector({logits.begin(), logits.end()}));
  return t.value(ops::bce_with_logits(t, z, labels))[0];
}

/// Parameters and forward pass for one of the four model kinds.
class CtrModel {
 public:
  CtrModel(FeatureSchema schema, ModelConfig config, std::uint64_t seed)
      : schema_(std::move(schema)), config_(std::move(config)) {
    config_.ssm.dim = config_.embedding_dim;
    const ModelKind kind = config_.kind;
    if (has_deep(kind) && config_.embedding_dim == 0) {
      throw ConfigError("model.embedding_dim", "must be positive");
    }
    if (has_deep(kind) && schema_.categorical().empty() && schema_.numeric().empty()) {
      throw ConfigError("schema", "no input fields");
    }
    for (std::size_t k = 0; k < schema_.categorical().size(); ++k) {
      const Side s = schema_.categorical_field(k).side;
      if (s == Side::User) user_fields_.push_back(k);
    }
    for (std::size_t k = 0; k < schema_.categorical().size(); ++k) {
      const Side s = schema_.categorical_field(k).side;
      if (s == Side::Item) item_fields_.push_back(k);
    }
    if (has_ssm(kind)) {
      try {
        layout_ = make_layout(config_.ssm, user_fields_.size(), item_fields_.size());
      } catch (const DomainError& e) {
        throw ConfigError("ssm", e.what());
      }
      if (layout_.sequence_count == 0) {
        throw ConfigError("ssm", "schema yields no permutation sequences (user fields: " +
                                     std::to_string(user_fields_.size()) + ", item fields: " +
                                     std::to_string(item_fields_.size()) + ")");
      }
    }

    Rng rng(seed);
    const std::size_t d = config_.embedding_dim;
    if (has_deep(kind)) {
      for (std::size_t k = 0; k < schema_.categorical().size(); ++k) {
        embeddings_.emplace_back(*schema_.categorical_field(k).bucket_count, d);
        embeddings_.back().init_uniform(rng);
      }
      std::size_t in = deep_input_width();
      for (std::size_t h : config_.hidden) {
        if (h == 0) throw ConfigError("model.hidden", "layer widths must be positive");
        deep_.push_back(make_layer(in, h, rng, true));
        in = h;
      }
      deep_.push_back(make_layer(in, 1, rng, false));
    }
    if (has_wide(kind)) {
      std::size_t offset = 0;
      for (std::size_t k = 0; k < schema_.categorical().size(); ++k) {
        wide_offsets_.push_back(static_cast<std::uint32_t>(offset));
        offset += *schema_.categorical_field(k).bucket_count;
      }
      wide_table_ = EmbeddingTable(std::max<std::size_t>(offset, 1), 1);
      if (!schema_.numeric().empty()) wide_numeric_ = Tensor({schema_.numeric().size(), 1});
      wide_bias_ = Tensor({1});
    }
    if (has_ssm(kind)) {
      kernels_ = KernelSet::standard();
      head_weight_ = Tensor({layout_.total, 1});
      head_bias_ = Tensor({1});
    }
  }

  ModelKind kind() const { return config_.kind; }
  const ModelConfig& config() const { return config_; }
  const FeatureSchema& schema() const { return schema_; }
  const FlattenLayout& layout() const { return layout_; }
  const KernelSet& kernels() const { return kernels_; }
  std::vector<DenseLayer>& deep_layers() { return deep_; }
  std::vector<EmbeddingTable>& embeddings() { return embeddings_; }

  /// n * d + #numeric (+ flatten dim for the SSM kind).
  std::size_t deep_input_width() const {
    std::size_t w = schema_.categorical().size() * config_.embedding_dim +
                    schema_.numeric().size();
    if (has_ssm(config_.kind)) w += layout_.total;
    return w;
  }

  /// Logits [B, 1] for the requested phase.
  Var forward(Trace& t, const ExampleBatch& batch, Phase phase = Phase::Full) {
    const ModelKind kind = config_.kind;
    if (phase == Phase::Pretrain && !has_ssm(kind)) {
      throw ConfigError("train.pretrain_epochs", "pretraining needs the SSM model");
    }
    const std::size_t B = batch.size();
    std::optional<Var> numeric;
    if (!schema_.numeric().empty()) {
      Tensor x({B, schema_.numeric().size()});
      for (std::size_t f = 0; f < schema_.numeric().size(); ++f) {
        for (std::size_t b = 0; b < B; ++b) x.at(b, f) = batch.numeric[f][b];
      }
      numeric = t.constant(std::move(x));
    }

    std::vector<Var> emb;
    std::optional<Var> flatten;
    if (has_deep(kind)) {
      const bool need_all = phase == Phase::Full;
      std::vector<std::optional<Var>> looked(embeddings_.size());
      auto lookup = [&](std::size_t k) {
        if (!looked[k]) looked[k] = embeddings_[k].lookup(t, batch.indices[k]);
        return *looked[k];
      };
      if (has_ssm(kind)) flatten = ssm_flatten(t, lookup);
      if (need_all) {
        for (std::size_t k = 0; k < embeddings_.size(); ++k) emb.push_back(lookup(k));
      }
    }

    if (phase == Phase::Pretrain) {
      return ssm_pretrain_logit(t, *flatten, t.parameter(head_weight_), t.parameter(head_bias_));
    }

    std::optional<Var> logit;
    if (has_wide(kind)) {
      std::vector<IndexList> sparse(B);
      for (std::size_t k = 0; k < schema_.categorical().size(); ++k) {
        for (std::size_t b = 0; b < B; ++b) {
          for (auto i : batch.indices[k][b]) sparse[b].push_back(wide_offsets_[k] + i);
        }
      }
      Var num = numeric ? *numeric : t.constant(Tensor({B, 1}));
      logit = wide_forward(t, sparse, num, wide_table_, wide_numeric_ ? &*wide_numeric_ : nullptr,
                           wide_bias_);
    }
    if (has_deep(kind)) {
      Var input = build_deep_input(t, emb, numeric, flatten);
      Var deep = deep_forward(t, input, deep_);
      logit = logit ? ops::add(t, *logit, deep) : deep;
    }
    return *logit;
  }

  /// U for a batch, [B, flatten dim].
  Var flatten(Trace& t, const ExampleBatch& batch) {
    if (!has_ssm(config_.kind)) throw ConfigError("model.kind", "model has no SSM block");
    return ssm_flatten(t, [&](std::size_t k) { return embeddings_[k].lookup(t, batch.indices[k]); });
  }

  /// Parameters updated in the given phase, in a fixed order. Frozen kernels
  /// are listed with trainable = false.
  std::vector<ParamRef> parameters(Phase phase = Phase::Full) {
    std::vector<ParamRef> out;
    const ModelKind kind = config_.kind;
    if (phase == Phase::Pretrain) {
      for (auto k : user_fields_) out.push_back(embedding_ref(k));
      for (auto k : item_fields_) out.push_back(embedding_ref(k));
      append_ssm(out);
      return out;
    }
    for (std::size_t k = 0; k < embeddings_.size(); ++k) out.push_back(embedding_ref(k));
    if (has_wide(kind)) {
      out.push_back({"wide/sparse", &wide_table_.weights, &wide_table_.touched, true});
      if (wide_numeric_) out.push_back({"wide/numeric", &*wide_numeric_, nullptr, true});
      out.push_back({"wide/bias", &wide_bias_, nullptr, true});
    }
    for (std::size_t l = 0; l < deep_.size(); ++l) {
      out.push_back({"deep/" + std::to_string(l) + "/weight", &deep_[l].weight, nullptr, true});
      out.push_back({"deep/" + std::to_string(l) + "/bias", &deep_[l].bias, nullptr, true});
    }
    if (has_ssm(kind)) append_ssm(out);
    return out;
  }

 private:
  static DenseLayer make_layer(std::size_t in, std::size_t out, Rng& rng, bool relu) {
    DenseLayer layer{Tensor({in, out}), Tensor({out})};
    const double bound = relu ? std::sqrt(6.0 / static_cast<double>(in))
                              : std::sqrt(6.0 / static_cast<double>(in + out));
    for (double& w : layer.weight.data()) w = rng.uniform(-bound, bound);
    return layer;
  }

  ParamRef embedding_ref(std::size_t k) {
    return {"emb/" + schema_.categorical_field(k).name, &embeddings_[k].weights,
            &embeddings_[k].touched, true};
  }

  void append_ssm(std::vector<ParamRef>& out) {
    const bool tk = config_.ssm.trainable_kernels;
    out.push_back({"ssm/kernels2", &kernels_.rank2, nullptr, tk});
    out.push_back({"ssm/kernels3", &kernels_.rank3, nullptr, tk});
    out.push_back({"ssm/head_weight", &head_weight_, nullptr, true});
    out.push_back({"ssm/head_bias", &head_bias_, nullptr, true});
  }

  template <typename Lookup>
  Var ssm_flatten(Trace& t, Lookup&& lookup) {
    std::vector<Var> perm;
    for (auto k : user_fields_) perm.push_back(lookup(k));
    for (auto k : item_fields_) perm.push_back(lookup(k));
    const bool tk = config_.ssm.trainable_kernels;
    return ssm_forward(t, perm, config_.ssm, layout_, t.parameter(kernels_.rank2, tk),
                       t.parameter(kernels_.rank3, tk));
  }

  FeatureSchema schema_;
  ModelConfig config_;
  std::vector<std::size_t> user_fields_;  // categorical positions
  std::vector<std::size_t> item_fields_;
  FlattenLayout layout_;

  std::vector<EmbeddingTable> embeddings_;
  std::vector<DenseLayer> deep_;
  std::vector<std::uint32_t> wide_offsets_;
  EmbeddingTable wide_table_;
  std::optional<Tensor> wide_numeric_;
  Tensor wide_bias_;
  KernelSet kernels_;
  Tensor head_weight_;
  Tensor head_bias_;
};

}  // namespace ssmctr
