#pragma once

#include <cctype>
#include <algorithm>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "ssmctr/ops.hpp"

namespace ssmctr {

class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Problems with a schema or run configuration; `key()` names the offending
/// entry.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& message)
      : std::runtime_error(key.empty() ? message : key + ": " + message),
        key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

enum class FieldKind { Numeric, CategoricalSingle, CategoricalMulti };
enum class Side { User, Item, Context };
/// How a multi-value field's raw string is split into values.
enum class Tokenizer { Pipe, Chars, Space };

inline std::string_view name_of(FieldKind k) {
  switch (k) {
    case FieldKind::Numeric: return "numeric";
    case FieldKind::CategoricalSingle: return "categorical-single";
    case FieldKind::CategoricalMulti: return "categorical-multi";
  }
  return "?";
}
inline std::string_view name_of(Side s) {
  switch (s) {
    case Side::User: return "user";
    case Side::Item: return "item";
    case Side::Context: return "context";
  }
  return "?";
}
inline std::string_view name_of(Tokenizer t) {
  switch (t) {
    case Tokenizer::Pipe: return "pipe";
    case Tokenizer::Chars: return "chars";
    case Tokenizer::Space: return "space";
  }
  return "?";
}

struct FieldSpec {
  std::string name;
  FieldKind kind = FieldKind::CategoricalSingle;
  std::optional<std::uint32_t> bucket_count;
  Side side = Side::Context;
  // Raw column feeding this field; empty means `name`.
  std::string source;
  Tokenizer tokenizer = Tokenizer::Pipe;
  // Optional min-max normalization for numeric fields.
  std::optional<std::pair<double, double>> normalize;

  bool categorical() const { return kind != FieldKind::Numeric; }
  const std::string& column() const { return source.empty() ? name : source; }

  friend bool operator==(const FieldSpec&, const FieldSpec&) = default;
};

/// 64-bit FNV-1a followed by a splitmix finalizer. Stable across processes
/// and platforms.
inline std::uint64_t stable_hash(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  h ^= h >> 30;
  h *= 0xbf58476d1ce4e5b9ULL;
  h ^= h >> 27;
  h *= 0x94d049bb133111ebULL;
  h ^= h >> 31;
  return h;
}

inline std::uint32_t encode_single(std::string_view value,
                                   const FieldSpec& field) {
  if (field.kind != FieldKind::CategoricalSingle) {
    throw ConfigError(field.name, "encode_single on a non single-value field");
  }
  return static_cast<std::uint32_t>(stable_hash(value) % *field.bucket_count);
}

/// Hashes every value, drops duplicate indices and returns them sorted.
inline IndexList encode_multi(std::span<const std::string> values,
                              const FieldSpec& field) {
  if (field.kind != FieldKind::CategoricalMulti) {
    throw ConfigError(field.name, "encode_multi on a non multi-value field");
  }
  IndexList out;
  out.reserve(values.size());
  for (const auto& v : values) {
    out.push_back(
        static_cast<std::uint32_t>(stable_hash(v) % *field.bucket_count));
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

/// Splits UTF-8 text into one token per Unicode scalar value, keeping order
/// and duplicates. Malformed input raises ParseError naming the byte offset.
inline std::vector<std::string> word_hash(std::string_view text) {
  std::vector<std::string> tokens;
  std::size_t i = 0;
  auto fail = [&](std::size_t at) {
    throw ParseError("invalid UTF-8 sequence at byte offset " +
                     std::to_string(at));
  };
  while (i < text.size()) {
    const auto lead = static_cast<unsigned char>(text[i]);
    std::size_t len = 0;
    std::uint32_t cp = 0;
    if (lead < 0x80) {
      len = 1;
      cp = lead;
    } else if ((lead & 0xE0) == 0xC0) {
      len = 2;
      cp = lead & 0x1F;
    } else if ((lead & 0xF0) == 0xE0) {
      len = 3;
      cp = lead & 0x0F;
    } else if ((lead & 0xF8) == 0xF0) {
      len = 4;
      cp = lead & 0x07;
    } else {
      fail(i);
    }
    if (i + len > text.size()) fail(i);
    for (std::size_t k = 1; k < len; ++k) {
      const auto c = static_cast<unsigned char>(text[i + k]);
      if ((c & 0xC0) != 0x80) fail(i + k);
      cp = (cp << 6) | (c & 0x3F);
    }
    // Overlong forms, surrogates and values past U+10FFFF are not scalars.
    static constexpr std::uint32_t min_for_len[] = {0, 0, 0x80, 0x800, 0x10000};
    if (cp < min_for_len[len] || cp > 0x10FFFF ||
        (cp >= 0xD800 && cp <= 0xDFFF)) {
      fail(i);
    }
    tokens.emplace_back(text.substr(i, len));
    i += len;
  }
  return tokens;
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = s.find(sep, start);
    out.emplace_back(s.substr(start, pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

/// Ordered list of fields. Categorical and numeric fields keep their schema
/// order within each group.
class FeatureSchema {
 public:
  FeatureSchema() = default;

  explicit FeatureSchema(std::vector<FieldSpec> fields)
      : fields_(std::move(fields)) {
    std::unordered_set<std::string> seen;
    for (std::size_t i = 0; i < fields_.size(); ++i) {
      const FieldSpec& f = fields_[i];
      const std::string key = "fields[" + std::to_string(i) + "]";
      if (f.name.empty()) throw ConfigError(key + ".name", "empty field name");
      if (!seen.insert(f.name).second) {
        throw ConfigError(key + ".name", "duplicate field name '" + f.name + "'");
      }
      if (f.categorical()) {
        if (!f.bucket_count || *f.bucket_count < 2) {
          throw ConfigError(key + ".buckets",
                            "categorical field '" + f.name +
                                "' needs a bucket count >= 2");
        }
        categorical_.push_back(i);
      } else {
        if (f.bucket_count) {
          throw ConfigError(key + ".buckets", "numeric field '" + f.name +
                                                  "' cannot declare buckets");
        }
        numeric_.push_back(i);
      }
    }
  }

  const std::vector<FieldSpec>& fields() const { return fields_; }
  std::size_t size() const { return fields_.size(); }

  /// Schema indices of categorical fields, in schema order.
  const std::vector<std::size_t>& categorical() const { return categorical_; }
  const std::vector<std::size_t>& numeric() const { return numeric_; }

  const FieldSpec& categorical_field(std::size_t k) const {
    return fields_[categorical_[k]];
  }
  const FieldSpec& numeric_field(std::size_t k) const {
    return fields_[numeric_[k]];
  }

  /// Sum of bucket counts over categorical fields.
  std::size_t sparse_dimension() const {
    std::size_t n = 0;
    for (auto i : categorical_) n += *fields_[i].bucket_count;
    return n;
  }

  nlohmann::json to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& f : fields_) {
      nlohmann::json j;
      j["name"] = f.name;
      j["kind"] = std::string(name_of(f.kind));
      j["side"] = std::string(name_of(f.side));
      if (f.bucket_count) j["buckets"] = *f.bucket_count;
      if (!f.source.empty()) j["source"] = f.source;
      if (f.kind == FieldKind::CategoricalMulti) {
        j["tokenizer"] = std::string(name_of(f.tokenizer));
      }
      if (f.normalize) {
        j["normalize"] = {f.normalize->first, f.normalize->second};
      }
      arr.push_back(std::move(j));
    }
    return {{"fields", arr}};
  }

  static FeatureSchema from_json(const nlohmann::json& j) {
    if (!j.is_object() || !j.contains("fields") || !j["fields"].is_array()) {
      throw ConfigError("fields", "schema must be an object with a 'fields' array");
    }
    std::vector<FieldSpec> fields;
    std::size_t i = 0;
    for (const auto& jf : j["fields"]) {
      const std::string key = "fields[" + std::to_string(i++) + "]";
      FieldSpec f;
      try {
        f.name = jf.at("name").get<std::string>();
        f.kind = parse_kind(jf.at("kind").get<std::string>(), key + ".kind");
        f.side = parse_side(jf.value("side", std::string("context")),
                            key + ".side");
        if (jf.contains("buckets")) {
          const auto b = jf["buckets"].get<std::int64_t>();
          if (b < 1 || b > 0xFFFFFFFFLL) {
            throw ConfigError(key + ".buckets", "out of range");
          }
          f.bucket_count = static_cast<std::uint32_t>(b);
        }
        f.source = jf.value("source", std::string());
        f.tokenizer = parse_tokenizer(jf.value("tokenizer", std::string("pipe")),
                                      key + ".tokenizer");
        if (jf.contains("normalize")) {
          const auto& n = jf["normalize"];
          if (!n.is_array() || n.size() != 2 ||
              n[0].get<double>() >= n[1].get<double>()) {
            throw ConfigError(key + ".normalize", "expected [min, max] with min < max");
          }
          f.normalize = std::make_pair(n[0].get<double>(), n[1].get<double>());
        }
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError(key, e.what());
      }
      fields.push_back(std::move(f));
    }
    return FeatureSchema(std::move(fields));
  }

  static FeatureSchema load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("schema", "cannot open schema file " + path);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError("schema", path + ": " + e.what());
    }
    return from_json(j);
  }

  /// Content hash of the canonical serialization.
  std::uint64_t hash() const { return stable_hash(to_json().dump()); }

  friend bool operator==(const FeatureSchema& a, const FeatureSchema& b) {
    return a.fields_ == b.fields_;
  }

 private:
  static FieldKind parse_kind(const std::string& s, const std::string& key) {
    if (s == "numeric") return FieldKind::Numeric;
    if (s == "categorical-single") return FieldKind::CategoricalSingle;
    if (s == "categorical-multi") return FieldKind::CategoricalMulti;
    throw ConfigError(key, "unknown field kind '" + s + "'");
  }
  static Side parse_side(const std::string& s, const std::string& key) {
    if (s == "user") return Side::User;
    if (s == "item") return Side::Item;
    if (s == "context") return Side::Context;
    throw ConfigError(key, "unknown side '" + s + "'");
  }
  static Tokenizer parse_tokenizer(const std::string& s, const std::string& key) {
    if (s == "pipe") return Tokenizer::Pipe;
    if (s == "chars") return Tokenizer::Chars;
    if (s == "space") return Tokenizer::Space;
    throw ConfigError(key, "unknown tokenizer '" + s + "'");
  }

  std::vector<FieldSpec> fields_;
  std::vector<std::size_t> categorical_;
  std::vector<std::size_t> numeric_;
};

/// One encoded example: numeric values and index lists in schema group order.
struct Example {
  double label = 0.0;
  std::vector<double> numeric;
  std::vector<IndexList> indices;
};

/// Maps raw string columns onto a schema. Column positions are resolved once
/// against the loader's header.
class Encoder {
 public:
  Encoder(const FeatureSchema& schema, const std::vector<std::string>& columns)
      : schema_(&schema) {
    for (const auto& f : schema.fields()) {
      auto it = std::find(columns.begin(), columns.end(), f.column());
      if (it == columns.end()) {
        throw ConfigError(f.name, "source column '" + f.column() +
                                      "' is not provided by the dataset");
      }
      column_of_.push_back(static_cast<std::size_t>(it - columns.begin()));
    }
  }

  /// Throws ParseError for numeric values that do not parse.
  Example encode(double label, const std::vector<std::string>& values) const {
    Example ex;
    ex.label = label;
    const auto& fields = schema_->fields();
    ex.numeric.reserve(schema_->numeric().size());
    ex.indices.reserve(schema_->categorical().size());
    for (std::size_t i = 0; i < fields.size(); ++i) {
      const FieldSpec& f = fields[i];
      const std::string& raw = values.at(column_of_[i]);
      switch (f.kind) {
        case FieldKind::Numeric: {
          double v = 0.0;
          try {
            std::size_t used = 0;
            v = std::stod(raw, &used);
            if (used != raw.size()) throw std::invalid_argument(raw);
          } catch (const std::exception&) {
            throw ParseError("field '" + f.name + "': not a number: '" + raw + "'");
          }
          if (f.normalize) {
            const auto [lo, hi] = *f.normalize;
            v = std::clamp((v - lo) / (hi - lo), 0.0, 1.0);
          }
          ex.numeric.push_back(v);
          break;
        }
        case FieldKind::CategoricalSingle:
          ex.indices.push_back({encode_single(raw, f)});
          break;
        case FieldKind::CategoricalMulti: {
          std::vector<std::string> parts;
          if (!raw.empty()) {
            switch (f.tokenizer) {
              case Tokenizer::Pipe: parts = split(raw, '|'); break;
              case Tokenizer::Space:
                parts = split(raw, ' ');
                std::erase(parts, std::string());
                break;
              case Tokenizer::Chars:
                parts = word_hash(raw);
                std::erase_if(parts, [](const std::string& t) {
                  return t.size() == 1 && std::isspace(static_cast<unsigned char>(t[0]));
                });
                break;
            }
          }
          ex.indices.push_back(encode_multi(parts, f));
          break;
        }
      }
    }
    return ex;
  }

 private:
  const FeatureSchema* schema_;
  std::vector<std::size_t> column_of_;
};

}  // namespace ssmctr
