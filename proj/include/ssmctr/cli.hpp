#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "ssmctr/checkpoint.hpp"
#include "ssmctr/config.hpp"
#include "ssmctr/datasets.hpp"
#include "ssmctr/metrics.hpp"
#include "ssmctr/train.hpp"

namespace ssmctr::cli {

/// Process exit codes, one per failure class.
enum ExitCode : int {
  kOk = 0,
  kConfig = 2,
  kDivergence = 3,
  kDataOrMetric = 4,
  kCheckpointMisuse = 5,
};

enum class Split { Train, Test, All };

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "test") return Split::Test;
  if (s == "all") return Split::All;
  throw ConfigError("split", "expected train, test or all, got '" + s + "'");
}

struct LoadedData {
  Dataset train;
  Dataset test;
  LoadStats stats;
};

inline LoadedData load_data(const RunConfig& config, const FeatureSchema& schema) {
  if (config.data.format == DataFormat::MovieLens) {
    MovieLensData ml = load_movielens(config.data.ratings, config.data.movies, schema,
                                      config.data.limit);
    auto [train, test] = chronological_split(ml, config.data.test_fraction);
    return {std::move(train), std::move(test), std::move(ml.stats)};
  }
  AvazuData av = load_avazu(config.data.path, schema, config.data.test_from_day, config.data.limit);
  return {std::move(av.train), std::move(av.test), std::move(av.stats)};
}

inline Dataset select_split(LoadedData& data, Split split) {
  switch (split) {
    case Split::Train: return std::move(data.train);
    case Split::Test: return std::move(data.test);
    case Split::All: {
      Dataset all = std::move(data.train);
      for (std::size_t i = 0; i < data.test.size(); ++i) all.add(data.test.example(i));
      return all;
    }
  }
  return {};
}

inline void report_skips(const LoadStats& stats, std::ostream& err) {
  if (stats.skipped == 0) return;
  err << "warning: skipped " << stats.skipped << " of " << stats.rows << " rows\n";
  for (const auto& w : stats.warnings) err << "  " << w << "\n";
}

/// Runs `body`, mapping library exceptions onto exit codes.
template <typename F>
int guarded(std::ostream& err, F&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const DivergenceError& e) {
    err << "error: " << e.what() << "\n";
    return kDivergence;
  } catch (const MetricError& e) {
    err << "error: " << e.what() << "\n";
    return kDataOrMetric;
  } catch (const ParseError& e) {
    err << "data error: " << e.what() << "\n";
    return kDataOrMetric;
  } catch (const CheckpointError& e) {
    err << "checkpoint error: " << e.what() << "\n";
    return kCheckpointMisuse;
  }
}

inline RunConfig load_run_config(const std::string& config_path,
                                 const std::vector<std::string>& overrides) {
  RunConfig config = RunConfig::load(config_path, overrides);
  config.validate();
  return config;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("output_dir", "cannot write " + path.string());
  out << text;
}

/// Trains the configured model; writes checkpoint.ssmc, train_log.jsonl,
/// eval_report.json and config.json into the output directory.
inline int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides,
                     const std::optional<std::string>& out_dir, std::ostream& out,
                     std::ostream& err) {
  return guarded(err, [&] {
    RunConfig config = load_run_config(config_path, overrides);
    if (out_dir) config.output_dir = *out_dir;
    const FeatureSchema schema = FeatureSchema::load(config.schema_path);
    LoadedData data = load_data(config, schema);
    report_skips(data.stats, err);
    if (data.train.empty()) throw MetricError("no examples in the training split");
    const Dataset* heldout = data.test.empty() ? nullptr : &data.test;
    TrainResult result = train(schema, config.model, data.train, config.train, heldout);

    namespace fs = std::filesystem;
    fs::create_directories(config.output_dir);
    const fs::path dir(config.output_dir);
    save_checkpoint((dir / "checkpoint.ssmc").string(), result.model, config);
    write_text(dir / "train_log.jsonl", to_ndjson(result.log));
    write_text(dir / "config.json", config.to_json().dump(2) + "\n");
    if (result.final_report) {
      write_text(dir / "eval_report.json", result.final_report->to_json().dump() + "\n");
      out << result.final_report->to_json().dump() << "\n";
    } else {
      out << R"({"note":"no held-out examples; nothing evaluated"})" << "\n";
    }
    return kOk;
  });
}

/// Evaluates a checkpoint on a split of the dataset described by the
/// checkpoint's stamped config, or by `config_path` when given.
inline int cmd_evaluate(const std::string& checkpoint_path,
                        const std::optional<std::string>& config_path,
                        const std::vector<std::string>& overrides, const std::string& split,
                        std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    Checkpoint ck = load_checkpoint(checkpoint_path);
    RunConfig config = config_path ? load_run_config(*config_path, overrides) : ck.config;
    if (!config_path && !overrides.empty()) {
      nlohmann::json j = config.to_json();
      for (const auto& o : overrides) config_detail::apply_override(j, o);
      config = RunConfig::from_json(j);
      config.validate();
    }
    const FeatureSchema schema = FeatureSchema::load(config.schema_path);
    if (schema.hash() != ck.schema_hash) {
      err << "error: dataset schema hash " << hex64(schema.hash())
          << " does not match checkpoint schema hash " << hex64(ck.schema_hash) << "\n";
      return kDataOrMetric;
    }
    LoadedData data = load_data(config, schema);
    report_skips(data.stats, err);
    Dataset ds = select_split(data, parse_split(split));
    EvalReport r = evaluate(ck.model, ds, config.train.eval_workers);
    out << r.to_json().dump() << "\n";
    return kOk;
  });
}

inline std::string format_compare_table(const std::vector<EvalReport>& reports) {
  const EvalReport* base = nullptr;
  for (const auto& r : reports) {
    if (r.kind == ModelKind::WideDeep) base = &r;
  }
  std::string out = "model\tAUC\tRelaImpr\n";
  char buf[128];
  for (const auto& r : reports) {
    std::string impr;
    if (r.kind == ModelKind::WideDeep) {
      impr = "~";
    } else if (base) {
      std::snprintf(buf, sizeof buf, "%.2f%%", rela_impr(r.auc, base->auc));
      impr = buf;
    } else {
      impr = "n/a";
    }
    std::snprintf(buf, sizeof buf, "%s\t%.4f\t", std::string(name_of(r.kind)).c_str(), r.auc);
    out += buf + impr + "\n";
  }
  return out;
}

/// Trains all four model kinds on the same split and seed and prints AUC
/// with RelaImpr against WideDeep.
inline int cmd_compare(const std::string& config_path, const std::vector<std::string>& overrides,
                       const std::optional<std::string>& out_dir, std::ostream& out,
                       std::ostream& err) {
  return guarded(err, [&] {
    RunConfig config = load_run_config(config_path, overrides);
    const FeatureSchema schema = FeatureSchema::load(config.schema_path);
    LoadedData data = load_data(config, schema);
    report_skips(data.stats, err);
    if (data.train.empty() || data.test.empty()) {
      throw MetricError("compare needs non-empty train and test splits");
    }
    std::vector<EvalReport> reports;
    for (ModelKind kind : kAllModelKinds) {
      ModelConfig mc = config.model;
      mc.kind = kind;
      TrainResult r = train(schema, mc, data.train, config.train, &data.test);
      reports.push_back(*r.final_report);
    }
    const std::string table = format_compare_table(reports);
    out << table;
    if (out_dir) {
      std::filesystem::create_directories(*out_dir);
      write_text(std::filesystem::path(*out_dir) / "compare.tsv", table);
    }
    return kOk;
  });
}

/// Writes "example_id, label, prediction, U..." rows (tab-separated) for a
/// split, using an SSM checkpoint.
inline int cmd_export_flatten(const std::string& checkpoint_path,
                              const std::optional<std::string>& config_path,
                              const std::vector<std::string>& overrides, const std::string& split,
                              const std::string& out_path, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    Checkpoint ck = load_checkpoint(checkpoint_path);
    if (!has_ssm(ck.model.kind())) {
      err << "error: export-flatten needs a WideDeepSSM checkpoint, got "
          << name_of(ck.model.kind()) << "\n";
      return kCheckpointMisuse;
    }
    RunConfig config = config_path ? load_run_config(*config_path, overrides) : ck.config;
    const FeatureSchema schema = FeatureSchema::load(config.schema_path);
    if (schema.hash() != ck.schema_hash) {
      err << "error: dataset schema does not match the checkpoint\n";
      return kDataOrMetric;
    }
    LoadedData data = load_data(config, schema);
    report_skips(data.stats, err);
    Dataset ds = select_split(data, parse_split(split));

    std::ofstream file(out_path, std::ios::binary | std::ios::trunc);
    if (!file) throw ConfigError("out", "cannot write " + out_path);
    const std::size_t batch_size = 256;
    std::vector<std::size_t> rows;
    ExampleBatch batch;
    char buf[40];
    for (std::size_t b = 0; b < ds.size(); b += batch_size) {
      rows.clear();
      for (std::size_t r = b; r < std::min(ds.size(), b + batch_size); ++r) rows.push_back(r);
      Batcher::gather(ds, rows, batch);
      Trace t(false);
      const Tensor logits = t.value(ck.model.forward(t, batch, Phase::Full));
      const Tensor& u = t.value(ck.model.flatten(t, batch));
      const std::size_t width = u.dim(1);
      for (std::size_t i = 0; i < rows.size(); ++i) {
        std::string line = std::to_string(rows[i]) + "\t" +
                           std::to_string(static_cast<int>(batch.labels[i]));
        std::snprintf(buf, sizeof buf, "\t%.17g", stable_sigmoid(logits[i]));
        line += buf;
        for (std::size_t k = 0; k < width; ++k) {
          std::snprintf(buf, sizeof buf, "\t%.17g", u[i * width + k]);
          line += buf;
        }
        file << line << "\n";
      }
    }
    out << "wrote " << ds.size() << " rows x " << (3 + ck.model.layout().total)
        << " columns to " << out_path << "\n";
    return kOk;
  });
}

}  // namespace ssmctr::cli
