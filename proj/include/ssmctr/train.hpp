#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "ssmctr/datasets.hpp"
#include "ssmctr/metrics.hpp"
#include "ssmctr/models.hpp"
#include "ssmctr/optim.hpp"

namespace ssmctr {

/// Training loss became NaN or infinite.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(std::size_t step, Phase phase, double loss)
      : std::runtime_error("training diverged at step " + std::to_string(step) + " (" +
                           std::string(name_of(phase)) + "): loss = " + std::to_string(loss)),
        step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

struct TrainConfig {
  OptimizerConfig optimizer;
  std::size_t batch_size = 512;
  std::size_t pretrain_epochs = 1;  // SSM model only; 0 disables phase 1
  std::size_t finetune_epochs = 1;
  std::uint64_t seed = 42;
  std::size_t eval_every = 0;           // steps; 0 = end of each epoch only
  std::size_t early_stop_patience = 0;  // evals without improvement; 0 = off
  std::size_t max_steps = 0;            // per phase; 0 = unlimited
  std::size_t eval_workers = 1;

  void validate() const {
    if (!(optimizer.lr > 0.0)) throw ConfigError("optimizer.lr", "must be > 0");
    if (optimizer.beta1 < 0.0 || optimizer.beta1 >= 1.0) {
      throw ConfigError("optimizer.beta1", "must lie in [0, 1)");
    }
    if (optimizer.beta2 < 0.0 || optimizer.beta2 >= 1.0) {
      throw ConfigError("optimizer.beta2", "must lie in [0, 1)");
    }
    if (!(optimizer.eps > 0.0)) throw ConfigError("optimizer.eps", "must be > 0");
    if (batch_size == 0) throw ConfigError("train.batch_size", "must be >= 1");
    if (eval_workers == 0) throw ConfigError("train.eval_workers", "must be >= 1");
  }
};

struct EvalReport {
  double auc = 0.0;
  double logloss = 0.0;
  std::size_t sample_count = 0;
  std::size_t positives = 0;
  ModelKind kind = ModelKind::WideDeep;
  std::size_t step = 0;

  nlohmann::json to_json() const {
    return {{"auc", auc},           {"logloss", logloss},
            {"sample_count", sample_count}, {"positives", positives},
            {"model", std::string(name_of(kind))}, {"step", step}};
  }
};

/// One line of the training log.
struct LogRecord {
  std::size_t step = 0;  // optimizer steps within the phase
  Phase phase = Phase::Full;
  std::size_t epoch = 0;
  double train_loss = 0.0;  // mean batch loss since the previous record
  std::optional<double> eval_auc;
  std::optional<double> eval_logloss;

  nlohmann::json to_json() const {
    nlohmann::json j = {{"step", step},
                        {"phase", std::string(name_of(phase))},
                        {"epoch", epoch},
                        {"train_loss", train_loss}};
    j["eval_auc"] = eval_auc ? nlohmann::json(*eval_auc) : nlohmann::json(nullptr);
    j["eval_logloss"] = eval_logloss ? nlohmann::json(*eval_logloss) : nlohmann::json(nullptr);
    return j;
  }
};

/// Newline-delimited JSON, one record per line.
inline std::string to_ndjson(const std::vector<LogRecord>& log) {
  std::string out;
  for (const auto& r : log) out += r.to_json().dump() + "\n";
  return out;
}

/// Logits for every example of `data` in dataset order. Parameters are only
/// read; with workers > 1 the rows are split into contiguous shards, each run
/// on its own no-grad trace.
inline std::vector<double> predict_logits(CtrModel& model, const Dataset& data,
                                          std::size_t batch_size = 1024,
                                          std::size_t workers = 1) {
  std::vector<double> logits(data.size());
  auto run = [&](std::size_t begin, std::size_t end) {
    ExampleBatch batch;
    std::vector<std::size_t> rows;
    for (std::size_t b = begin; b < end; b += batch_size) {
      rows.clear();
      for (std::size_t r = b; r < std::min(end, b + batch_size); ++r) rows.push_back(r);
      Batcher::gather(data, rows, batch);
      Trace t(false);
      const Tensor& z = t.value(model.forward(t, batch, Phase::Full));
      std::copy(z.data().begin(), z.data().end(), logits.begin() + static_cast<long>(b));
    }
  };
  workers = std::max<std::size_t>(1, std::min(workers, data.size()));
  if (workers == 1) {
    run(0, data.size());
    return logits;
  }
  std::vector<std::thread> pool;
  const std::size_t chunk = (data.size() + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t begin = w * chunk;
    const std::size_t end = std::min(data.size(), begin + chunk);
    if (begin >= end) break;
    pool.emplace_back(run, begin, end);
  }
  for (auto& th : pool) th.join();
  return logits;
}

/// AUC and mean log loss over a dataset. Throws MetricError for an empty or
/// single-class dataset.
inline EvalReport evaluate(CtrModel& model, const Dataset& data, std::size_t workers = 1,
                           std::size_t step = 0) {
  if (data.empty()) throw MetricError("no examples to evaluate");
  std::vector<double> labels(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) labels[i] = data.label(i);
  const std::vector<double> logits = predict_logits(model, data, 1024, workers);
  EvalReport r;
  r.auc = auc(logits, labels);
  r.logloss = logloss_from_logits(logits, labels);
  r.sample_count = data.size();
  r.positives = data.positives();
  r.kind = model.kind();
  r.step = step;
  return r;
}

struct TrainResult {
  CtrModel model;
  std::vector<LogRecord> log;
  std::optional<EvalReport> final_report;
  std::size_t pretrain_steps = 0;
  std::size_t finetune_steps = 0;
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::uint64_t h = seed ^ (a * 0x9e3779b97f4a7c15ULL) ^ (b * 0xc2b2ae3d27d4eb4fULL);
  h ^= h >> 31;
  h *= 0xbf58476d1ce4e5b9ULL;
  h ^= h >> 29;
  return h;
}

}  // namespace detail

/// Two-phase training. Phase 1 (SSM model, pretrain_epochs > 0) fits the
/// permutation-field embeddings and the SSM logistic head. Phase 2 fits the
/// whole model from a fresh optimizer state, with kernels frozen unless
/// configured trainable. When `heldout` is given it is evaluated every
/// `eval_every` steps and at the end of every epoch, and drives early
/// stopping. Deterministic for a fixed seed.
inline TrainResult train(const FeatureSchema& schema, const ModelConfig& model_config,
                         const Dataset& data, const TrainConfig& config,
                         const Dataset* heldout = nullptr) {
  config.validate();
  if (data.empty()) throw MetricError("training set has no examples");
  TrainResult result{CtrModel(schema, model_config, config.seed), {}, std::nullopt, 0, 0};
  CtrModel& model = result.model;

  struct Stage {
    Phase phase;
    std::size_t epochs;
  };
  std::vector<Stage> stages;
  if (has_ssm(model.kind()) && config.pretrain_epochs > 0) {
    stages.push_back({Phase::Pretrain, config.pretrain_epochs});
  }
  stages.push_back({Phase::Full, config.finetune_epochs});

  for (const Stage& stage : stages) {
    Optimizer opt(config.optimizer);
    std::vector<ParamRef> params = model.parameters(stage.phase);
    std::size_t step = 0;
    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    double best_logloss = std::numeric_limits<double>::infinity();
    std::size_t bad_evals = 0;
    bool stop = false;

    auto log_point = [&](std::size_t epoch) {
      LogRecord rec;
      rec.step = step;
      rec.phase = stage.phase;
      rec.epoch = epoch;
      rec.train_loss = loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0;
      loss_sum = 0.0;
      loss_count = 0;
      if (heldout && stage.phase == Phase::Full) {
        EvalReport r = evaluate(model, *heldout, config.eval_workers, step);
        rec.eval_auc = r.auc;
        rec.eval_logloss = r.logloss;
        result.final_report = r;
        if (r.logloss < best_logloss) {
          best_logloss = r.logloss;
          bad_evals = 0;
        } else if (config.early_stop_patience > 0 &&
                   ++bad_evals >= config.early_stop_patience) {
          stop = true;
        }
      }
      result.log.push_back(rec);
    };

    for (std::size_t epoch = 0; epoch < stage.epochs && !stop; ++epoch) {
      const auto shuffle = detail::mix_seed(config.seed, static_cast<std::uint64_t>(stage.phase) + 1,
                                            epoch);
      Batcher batches(data, config.batch_size, shuffle);
      ExampleBatch batch;
      bool logged_at_end = false;
      while (!stop && batches.next(batch)) {
        Trace t;
        Var logits = model.forward(t, batch, stage.phase);
        Var loss = ops::bce_with_logits(t, logits, batch.labels);
        const double value = t.value(loss)[0];
        ++step;
        if (!std::isfinite(value)) throw DivergenceError(step, stage.phase, value);
        t.backward(loss);
        opt.step(params);
        loss_sum += value;
        ++loss_count;
        logged_at_end = false;
        if (config.eval_every > 0 && step % config.eval_every == 0) {
          log_point(epoch);
          logged_at_end = true;
        }
        if (config.max_steps > 0 && step >= config.max_steps) stop = true;
      }
      if (!logged_at_end) log_point(epoch);
    }
    (stage.phase == Phase::Pretrain ? result.pretrain_steps : result.finetune_steps) = step;
  }
  return result;
}

}  // namespace ssmctr
