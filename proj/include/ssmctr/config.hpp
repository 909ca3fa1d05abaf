#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ssmctr/features.hpp"
#include "ssmctr/models.hpp"
#include "ssmctr/train.hpp"

namespace ssmctr {

/// Environment variable naming the directory that relative data paths are
/// resolved against.
inline constexpr const char* kDataDirEnv = "SSMCTR_DATA_DIR";

enum class DataFormat { MovieLens, Avazu };

struct DataConfig {
  DataFormat format = DataFormat::MovieLens;
  std::string ratings;  // MovieLens
  std::string movies;   // MovieLens
  std::string path;     // Avazu train.csv[.gz]
  std::size_t limit = 0;
  double test_fraction = 0.1;   // MovieLens chronological hold-out
  int test_from_day = 141030;   // Avazu YYMMDD
};

/// Everything one run needs: schema, data, model, optimizer and training.
struct RunConfig {
  std::string schema_path;
  DataConfig data;
  ModelConfig model;
  TrainConfig train;
  std::string output_dir = "out";

  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j, const std::string& base_dir = "");
  static RunConfig load(const std::string& path, const std::vector<std::string>& overrides = {});

  /// Referenced files must exist.
  void validate() const;

  friend bool operator==(const RunConfig& a, const RunConfig& b) {
    return a.to_json() == b.to_json();
  }
};

namespace config_detail {

inline std::string pool_kind_name(PoolKind k) { return k == PoolKind::Max ? "max" : "avg"; }

inline nlohmann::json defaults() { return RunConfig{}.to_json(); }

/// Overlays `user` onto `base`, rejecting keys `base` does not have and
/// values whose JSON type differs.
inline void merge(nlohmann::json& base, const nlohmann::json& user, const std::string& path) {
  if (!user.is_object()) throw ConfigError(path.empty() ? "config" : path, "expected an object");
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError(key, "unknown configuration key");
    nlohmann::json& slot = base[it.key()];
    const nlohmann::json& v = it.value();
    if (slot.is_object()) {
      merge(slot, v, key);
      continue;
    }
    const bool ok = (slot.is_number() && v.is_number()) || (slot.is_string() && v.is_string()) ||
                    (slot.is_boolean() && v.is_boolean()) || (slot.is_array() && v.is_array());
    if (!ok) throw ConfigError(key, "wrong value type: " + v.dump());
    slot = v;
  }
}

/// Applies one "a.b.c=value" override; value is parsed as JSON when possible
/// and taken as a string otherwise.
inline void apply_override(nlohmann::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError(assignment, "override must look like key.path=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::parse_error&) {
    value = raw;
  }
  nlohmann::json* node = &j;
  for (const auto& part : split(key, '.')) {
    if (node->is_null()) *node = nlohmann::json::object();
    if (!node->is_object()) throw ConfigError(key, "not an object path");
    node = &(*node)[part];
  }
  *node = value;
}

template <typename T>
T get(const nlohmann::json& j, const std::string& key) {
  try {
    return j.get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(key, e.what());
  }
}

inline std::size_t get_count(const nlohmann::json& j, const std::string& key) {
  if (!j.is_number_integer() || j.get<std::int64_t>() < 0) {
    throw ConfigError(key, "expected a non-negative integer, got " + j.dump());
  }
  return j.get<std::size_t>();
}

/// Absolute form of `p`: data paths go under $SSMCTR_DATA_DIR when it is set,
/// everything else under `base` (the config file's directory).
inline std::string resolve(const std::string& p, const std::string& base, bool data) {
  if (p.empty()) return p;
  namespace fs = std::filesystem;
  fs::path path(p);
  if (path.is_relative()) {
    const char* env = data ? std::getenv(kDataDirEnv) : nullptr;
    if (env && *env) {
      path = fs::path(env) / path;
    } else if (!base.empty()) {
      path = fs::path(base) / path;
    }
  }
  return fs::absolute(path).lexically_normal().string();
}

}  // namespace config_detail

inline nlohmann::json model_config_to_json(const ModelConfig& m) {
  nlohmann::json pools = nlohmann::json::array();
  for (const auto& p : m.ssm.poolings) {
    pools.push_back({{"window", p.window},
                     {"stride", p.stride},
                     {"kind", config_detail::pool_kind_name(p.kind)}});
  }
  return {{"model",
           {{"kind", std::string(name_of(m.kind))},
            {"embedding_dim", m.embedding_dim},
            {"hidden", m.hidden}}},
          {"ssm",
           {{"ranks", m.ssm.ranks},
            {"mode", m.ssm.mode == PermutationMode::All ? "all" : "cross-only"},
            {"linear_kernels", m.ssm.linear_kernels},
            {"product", m.ssm.product},
            {"poolings", pools},
            {"trainable_kernels", m.ssm.trainable_kernels}}}};
}

inline nlohmann::json RunConfig::to_json() const {
  nlohmann::json j = model_config_to_json(model);
  j["schema"] = schema_path;
  j["data"] = {{"format", data.format == DataFormat::MovieLens ? "movielens" : "avazu"},
               {"ratings", data.ratings},
               {"movies", data.movies},
               {"path", data.path},
               {"limit", data.limit},
               {"test_fraction", data.test_fraction},
               {"test_from_day", data.test_from_day}};
  j["optimizer"] = {{"kind", std::string(name_of(train.optimizer.kind))},
                    {"lr", train.optimizer.lr},
                    {"beta1", train.optimizer.beta1},
                    {"beta2", train.optimizer.beta2},
                    {"eps", train.optimizer.eps}};
  j["train"] = {{"batch_size", train.batch_size},
                {"pretrain_epochs", train.pretrain_epochs},
                {"finetune_epochs", train.finetune_epochs},
                {"seed", train.seed},
                {"eval_every", train.eval_every},
                {"early_stop_patience", train.early_stop_patience},
                {"max_steps", train.max_steps},
                {"eval_workers", train.eval_workers}};
  j["output_dir"] = output_dir;
  return j;
}

inline RunConfig RunConfig::from_json(const nlohmann::json& user, const std::string& base_dir) {
  using namespace config_detail;
  nlohmann::json j = defaults();
  merge(j, user, "");
  RunConfig c;
  c.schema_path = resolve(get<std::string>(j["schema"], "schema"), base_dir, false);

  const auto& d = j["data"];
  const auto fmt = get<std::string>(d["format"], "data.format");
  if (fmt == "movielens") {
    c.data.format = DataFormat::MovieLens;
  } else if (fmt == "avazu") {
    c.data.format = DataFormat::Avazu;
  } else {
    throw ConfigError("data.format", "expected movielens or avazu, got '" + fmt + "'");
  }
  c.data.ratings = resolve(get<std::string>(d["ratings"], "data.ratings"), base_dir, true);
  c.data.movies = resolve(get<std::string>(d["movies"], "data.movies"), base_dir, true);
  c.data.path = resolve(get<std::string>(d["path"], "data.path"), base_dir, true);
  c.data.limit = get_count(d["limit"], "data.limit");
  c.data.test_fraction = get<double>(d["test_fraction"], "data.test_fraction");
  if (!(c.data.test_fraction >= 0.0 && c.data.test_fraction <= 1.0)) {
    throw ConfigError("data.test_fraction", "must lie in [0, 1]");
  }
  c.data.test_from_day = get<int>(d["test_from_day"], "data.test_from_day");

  const auto& m = j["model"];
  c.model.kind = parse_model_kind(get<std::string>(m["kind"], "model.kind"));
  c.model.embedding_dim = get_count(m["embedding_dim"], "model.embedding_dim");
  c.model.hidden.clear();
  for (const auto& h : m["hidden"]) c.model.hidden.push_back(get_count(h, "model.hidden"));

  const auto& s = j["ssm"];
  c.model.ssm.ranks = get<std::vector<int>>(s["ranks"], "ssm.ranks");
  const auto mode = get<std::string>(s["mode"], "ssm.mode");
  if (mode == "all") {
    c.model.ssm.mode = PermutationMode::All;
  } else if (mode == "cross-only") {
    c.model.ssm.mode = PermutationMode::CrossOnly;
  } else {
    throw ConfigError("ssm.mode", "expected all or cross-only, got '" + mode + "'");
  }
  c.model.ssm.linear_kernels = get<bool>(s["linear_kernels"], "ssm.linear_kernels");
  c.model.ssm.product = get<bool>(s["product"], "ssm.product");
  c.model.ssm.trainable_kernels = get<bool>(s["trainable_kernels"], "ssm.trainable_kernels");
  c.model.ssm.poolings.clear();
  for (const auto& p : s["poolings"]) {
    PoolSpec spec;
    if (!p.is_object()) throw ConfigError("ssm.poolings", "entries must be objects");
    spec.window = get_count(p.value("window", nlohmann::json(3)), "ssm.poolings.window");
    spec.stride = get_count(p.value("stride", nlohmann::json(1)), "ssm.poolings.stride");
    const auto kind = p.value("kind", std::string("max"));
    if (kind == "max") {
      spec.kind = PoolKind::Max;
    } else if (kind == "avg") {
      spec.kind = PoolKind::Avg;
    } else {
      throw ConfigError("ssm.poolings.kind", "expected max or avg, got '" + kind + "'");
    }
    c.model.ssm.poolings.push_back(spec);
  }
  c.model.ssm.dim = c.model.embedding_dim;
  if (has_ssm(c.model.kind)) {
    try {
      c.model.ssm.validate();
    } catch (const DomainError& e) {
      throw ConfigError("ssm", e.what());
    }
  }

  const auto& o = j["optimizer"];
  const auto okind = get<std::string>(o["kind"], "optimizer.kind");
  if (okind == "adam") {
    c.train.optimizer.kind = OptimizerKind::Adam;
  } else if (okind == "sgd") {
    c.train.optimizer.kind = OptimizerKind::Sgd;
  } else {
    throw ConfigError("optimizer.kind", "expected adam or sgd, got '" + okind + "'");
  }
  c.train.optimizer.lr = get<double>(o["lr"], "optimizer.lr");
  c.train.optimizer.beta1 = get<double>(o["beta1"], "optimizer.beta1");
  c.train.optimizer.beta2 = get<double>(o["beta2"], "optimizer.beta2");
  c.train.optimizer.eps = get<double>(o["eps"], "optimizer.eps");

  const auto& t = j["train"];
  c.train.batch_size = get_count(t["batch_size"], "train.batch_size");
  c.train.pretrain_epochs = get_count(t["pretrain_epochs"], "train.pretrain_epochs");
  c.train.finetune_epochs = get_count(t["finetune_epochs"], "train.finetune_epochs");
  c.train.seed = get<std::uint64_t>(t["seed"], "train.seed");
  c.train.eval_every = get_count(t["eval_every"], "train.eval_every");
  c.train.early_stop_patience = get_count(t["early_stop_patience"], "train.early_stop_patience");
  c.train.max_steps = get_count(t["max_steps"], "train.max_steps");
  c.train.eval_workers = get_count(t["eval_workers"], "train.eval_workers");
  c.train.validate();

  c.output_dir = resolve(get<std::string>(j["output_dir"], "output_dir"), base_dir, false);
  return c;
}

inline RunConfig RunConfig::load(const std::string& path,
                                 const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config", "cannot open config file " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config", path + ": " + e.what());
  }
  for (const auto& o : overrides) config_detail::apply_override(j, o);
  const auto base = std::filesystem::path(path).parent_path().string();
  return from_json(j, base);
}

inline void RunConfig::validate() const {
  namespace fs = std::filesystem;
  auto need = [](const std::string& key, const std::string& p) {
    if (p.empty()) throw ConfigError(key, "path is not set");
    if (!fs::exists(p)) throw ConfigError(key, "file not found: " + p);
  };
  need("schema", schema_path);
  if (data.format == DataFormat::MovieLens) {
    need("data.ratings", data.ratings);
    need("data.movies", data.movies);
  } else {
    need("data.path", data.path);
  }
}

}  // namespace ssmctr
