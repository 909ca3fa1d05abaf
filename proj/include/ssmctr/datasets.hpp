#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <zlib.h>

#include "ssmctr/features.hpp"
#include "ssmctr/random.hpp"

namespace ssmctr {

/// Reads lines from plain or gzip-compressed files.
class LineReader {
 public:
  explicit LineReader(const std::string& path) : file_(gzopen(path.c_str(), "rb")) {
    if (!file_) throw ParseError("cannot open " + path);
    gzbuffer(file_.get(), 1 << 17);
  }

  /// Next line without its terminator; false at end of file.
  bool next(std::string& line) {
    line.clear();
    char buf[4096];
    while (gzgets(file_.get(), buf, sizeof buf)) {
      line.append(buf);
      if (!line.empty() && line.back() == '\n') {
        line.pop_back();
        if (!line.empty() && line.back() == '\r') line.pop_back();
        return true;
      }
    }
    return !line.empty();
  }

 private:
  struct Close {
    void operator()(gzFile f) const { gzclose(f); }
  };
  std::unique_ptr<gzFile_s, Close> file_;
};

/// Splits one CSV line, honoring double-quoted fields with "" escapes.
/// Returns false for an unterminated quote.
inline bool parse_csv_line(std::string_view line, std::vector<std::string>& out) {
  out.clear();
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(std::move(cur));
  return !quoted;
}

/// Encoded examples in compressed-row form.
class Dataset {
 public:
  Dataset() = default;
  explicit Dataset(const FeatureSchema& schema)
      : numeric_width_(schema.numeric().size()),
        categorical_width_(schema.categorical().size()) {
    for (std::size_t k = 0; k < categorical_width_; ++k) {
      buckets_.push_back(*schema.categorical_field(k).bucket_count);
    }
  }

  void add(const Example& ex) {
    if (ex.numeric.size() != numeric_width_ ||
        ex.indices.size() != categorical_width_) {
      throw DimensionError("example does not match dataset field counts");
    }
    for (std::size_t k = 0; k < categorical_width_; ++k) {
      for (auto idx : ex.indices[k]) {
        if (idx >= buckets_[k]) {
          throw std::out_of_range("index " + std::to_string(idx) + " outside field " +
                                  std::to_string(k) + " buckets");
        }
      }
    }
    labels_.push_back(static_cast<std::uint8_t>(ex.label != 0.0));
    numeric_.insert(numeric_.end(), ex.numeric.begin(), ex.numeric.end());
    for (const auto& list : ex.indices) {
      indices_.insert(indices_.end(), list.begin(), list.end());
      offsets_.push_back(indices_.size());
    }
  }

  std::size_t size() const { return labels_.size(); }
  bool empty() const { return labels_.empty(); }
  std::size_t numeric_width() const { return numeric_width_; }
  std::size_t categorical_width() const { return categorical_width_; }

  double label(std::size_t i) const { return labels_[i]; }
  double numeric(std::size_t i, std::size_t field) const {
    return numeric_[i * numeric_width_ + field];
  }
  std::span<const std::uint32_t> indices(std::size_t i, std::size_t field) const {
    const std::size_t k = i * categorical_width_ + field;
    return {indices_.data() + offsets_[k], indices_.data() + offsets_[k + 1]};
  }

  std::size_t positives() const {
    return static_cast<std::size_t>(
        std::count(labels_.begin(), labels_.end(), std::uint8_t{1}));
  }

  Example example(std::size_t i) const {
    Example ex;
    ex.label = label(i);
    for (std::size_t f = 0; f < numeric_width_; ++f) ex.numeric.push_back(numeric(i, f));
    for (std::size_t f = 0; f < categorical_width_; ++f) {
      auto s = indices(i, f);
      ex.indices.emplace_back(s.begin(), s.end());
    }
    return ex;
  }

  /// New dataset holding the listed rows in the given order.
  Dataset subset(std::span<const std::size_t> rows) const {
    Dataset out;
    out.numeric_width_ = numeric_width_;
    out.categorical_width_ = categorical_width_;
    out.buckets_ = buckets_;
    for (auto r : rows) out.add(example(r));
    return out;
  }

 private:
  std::size_t numeric_width_ = 0;
  std::size_t categorical_width_ = 0;
  std::vector<std::uint8_t> labels_;
  std::vector<double> numeric_;
  std::vector<std::uint32_t> buckets_;
  std::vector<std::uint64_t> offsets_{0};
  std::vector<std::uint32_t> indices_;
};

struct LoadStats {
  std::size_t rows = 0;
  std::size_t skipped = 0;
  std::vector<std::string> warnings;  // first few skip reasons

  void skip(std::string why) {
    ++skipped;
    if (warnings.size() < 10) warnings.push_back(std::move(why));
  }
};

/// MovieLens label rule: positive iff the rating is above 3.
inline double movielens_label(double rating) { return rating > 3.0 ? 1.0 : 0.0; }

struct MovieLensData {
  Dataset examples;
  std::vector<std::int64_t> timestamps;  // parallel to examples
  LoadStats stats;
};

/// Raw columns a MovieLens schema may reference.
inline const std::vector<std::string>& movielens_columns() {
  static const std::vector<std::string> cols = {
      "userId", "movieId", "genres", "title", "hour", "weekday", "weekday_hour"};
  return cols;
}

/// Loads ratings.csv joined with movies.csv. At most `limit` rating rows are
/// read when limit > 0. Malformed rows are skipped; more than 1% malformed
/// aborts with ParseError.
inline MovieLensData load_movielens(const std::string& ratings_path,
                                    const std::string& movies_path,
                                    const FeatureSchema& schema,
                                    std::size_t limit = 0) {
  struct Movie {
    std::string title, genres;
  };
  std::unordered_map<std::string, Movie> movies;
  {
    LineReader reader(movies_path);
    std::string line;
    std::vector<std::string> cols;
    bool header = true;
    while (reader.next(line)) {
      if (header) {
        header = false;
        continue;
      }
      if (!parse_csv_line(line, cols) || cols.size() != 3) continue;
      movies[cols[0]] = Movie{cols[1], cols[2]};
    }
  }

  Encoder encoder(schema, movielens_columns());
  MovieLensData out{Dataset(schema), {}, {}};
  LineReader reader(ratings_path);
  std::string line;
  std::vector<std::string> cols;
  std::vector<std::string> raw(movielens_columns().size());
  bool header = true;
  while ((limit == 0 || out.stats.rows < limit) && reader.next(line)) {
    if (header) {
      header = false;
      continue;
    }
    if (line.empty()) continue;
    ++out.stats.rows;
    const std::size_t row = out.stats.rows;
    if (!parse_csv_line(line, cols) || cols.size() != 4) {
      out.stats.skip("row " + std::to_string(row) + ": expected 4 columns");
      continue;
    }
    double rating = 0.0;
    std::int64_t ts = 0;
    try {
      std::size_t used = 0;
      rating = std::stod(cols[2], &used);
      if (used != cols[2].size() || !std::isfinite(rating)) throw std::invalid_argument("");
      ts = std::stoll(cols[3], &used);
      if (used != cols[3].size()) throw std::invalid_argument("");
    } catch (const std::exception&) {
      out.stats.skip("row " + std::to_string(row) + ": bad rating or timestamp");
      continue;
    }
    const std::time_t t = static_cast<std::time_t>(ts);
    std::tm tm{};
    gmtime_r(&t, &tm);
    auto it = movies.find(cols[1]);
    raw[0] = cols[0];
    raw[1] = cols[1];
    raw[2] = it != movies.end() ? it->second.genres : std::string();
    raw[3] = it != movies.end() ? it->second.title : std::string();
    raw[4] = std::to_string(tm.tm_hour);
    raw[5] = std::to_string(tm.tm_wday);
    raw[6] = raw[5] + "_" + raw[4];
    try {
      out.examples.add(encoder.encode(movielens_label(rating), raw));
    } catch (const ParseError& e) {
      out.stats.skip("row " + std::to_string(row) + ": " + e.what());
      continue;
    }
    out.timestamps.push_back(ts);
  }
  if (out.stats.rows > 0 &&
      static_cast<double>(out.stats.skipped) > 0.01 * static_cast<double>(out.stats.rows)) {
    std::string msg = "MovieLens: " + std::to_string(out.stats.skipped) + " of " +
                      std::to_string(out.stats.rows) + " rows malformed (> 1%)";
    for (const auto& w : out.stats.warnings) msg += "\n  " + w;
    throw ParseError(msg);
  }
  return out;
}

/// Orders examples by timestamp (file order breaks ties) and holds out the
/// latest `test_fraction` of them.
inline std::pair<Dataset, Dataset> chronological_split(const MovieLensData& data,
                                                       double test_fraction) {
  if (!(test_fraction >= 0.0 && test_fraction <= 1.0)) {
    throw DomainError("test_fraction must lie in [0, 1]");
  }
  const std::size_t n = data.examples.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return data.timestamps[a] < data.timestamps[b];
  });
  const auto n_test = static_cast<std::size_t>(
      std::llround(test_fraction * static_cast<double>(n)));
  std::span<const std::size_t> all(order);
  return {data.examples.subset(all.first(n - n_test)),
          data.examples.subset(all.last(n_test))};
}

struct AvazuData {
  Dataset train;
  Dataset test;
  LoadStats stats;
};

/// Derived columns added to the Avazu header.
inline const std::vector<std::string>& avazu_derived_columns() {
  static const std::vector<std::string> cols = {"hour_of_day", "day"};
  return cols;
}

/// Parses the YYMMDDHH hour field into (YYMMDD, HH).
inline std::optional<std::pair<int, int>> parse_avazu_hour(const std::string& s) {
  if (s.size() != 8 || !std::all_of(s.begin(), s.end(), ::isdigit)) return std::nullopt;
  const int day = std::stoi(s.substr(0, 6));
  const int hh = std::stoi(s.substr(6, 2));
  const int dd = std::stoi(s.substr(4, 2));
  const int mm = std::stoi(s.substr(2, 2));
  if (hh > 23 || dd < 1 || dd > 31 || mm < 1 || mm > 12) return std::nullopt;
  return std::make_pair(day, hh);
}

/// Streams the Kaggle Avazu train.csv (optionally gzipped). Rows whose day
/// (YYMMDD) is >= `test_from_day` go to the test set, earlier days to
/// training. Reads at most `limit` data rows when limit > 0.
inline AvazuData load_avazu(const std::string& path, const FeatureSchema& schema,
                            int test_from_day = 141030, std::size_t limit = 0) {
  AvazuData out{Dataset(schema), Dataset(schema), {}};
  LineReader reader(path);
  std::string line;
  if (!reader.next(line)) return out;  // empty file
  std::vector<std::string> header;
  parse_csv_line(line, header);
  const auto click_col = std::find(header.begin(), header.end(), "click") - header.begin();
  const auto hour_col = std::find(header.begin(), header.end(), "hour") - header.begin();
  if (click_col == static_cast<long>(header.size()) ||
      hour_col == static_cast<long>(header.size())) {
    throw ParseError("Avazu: header lacks click or hour column");
  }
  std::vector<std::string> columns = header;
  for (const auto& c : avazu_derived_columns()) columns.push_back(c);
  Encoder encoder(schema, columns);

  std::vector<std::string> cols;
  while ((limit == 0 || out.stats.rows < limit) && reader.next(line)) {
    if (line.empty()) continue;
    ++out.stats.rows;
    const std::string where = "row " + std::to_string(out.stats.rows);
    if (!parse_csv_line(line, cols) || cols.size() != header.size()) {
      out.stats.skip(where + ": expected " + std::to_string(header.size()) + " columns");
      continue;
    }
    const std::string& click = cols[click_col];
    if (click != "0" && click != "1") {
      out.stats.skip(where + ": click must be 0 or 1");
      continue;
    }
    const auto hour = parse_avazu_hour(cols[hour_col]);
    if (!hour) {
      out.stats.skip(where + ": unparseable hour '" + cols[hour_col] + "'");
      continue;
    }
    cols.push_back(std::to_string(hour->second));
    cols.push_back(std::to_string(hour->first));
    Example ex;
    try {
      ex = encoder.encode(click == "1" ? 1.0 : 0.0, cols);
    } catch (const ParseError& e) {
      out.stats.skip(where + ": " + e.what());
      continue;
    }
    (hour->first >= test_from_day ? out.test : out.train).add(ex);
  }
  return out;
}

/// A mini-batch laid out per field: numeric[f][b], indices[f][b].
struct ExampleBatch {
  std::vector<std::size_t> ids;
  std::vector<double> labels;
  std::vector<std::vector<double>> numeric;
  std::vector<std::vector<IndexList>> indices;

  std::size_t size() const { return labels.size(); }
};

/// Iterates a dataset in batches. With a seed the row order is a
/// deterministic shuffle; without one it is dataset order. The final partial
/// batch is emitted.
class Batcher {
 public:
  Batcher(const Dataset& data, std::size_t batch_size,
          std::optional<std::uint64_t> shuffle_seed = std::nullopt)
      : data_(&data), batch_size_(batch_size), order_(data.size()) {
    if (batch_size == 0) throw DomainError("batch_size must be >= 1");
    std::iota(order_.begin(), order_.end(), 0);
    if (shuffle_seed) {
      Rng rng(*shuffle_seed);
      rng.shuffle(order_);
    }
  }

  bool next(ExampleBatch& batch) {
    if (pos_ >= order_.size()) return false;
    const std::size_t end = std::min(order_.size(), pos_ + batch_size_);
    fill(std::span<const std::size_t>(order_).subspan(pos_, end - pos_), batch);
    pos_ = end;
    return true;
  }

  std::size_t batch_count() const {
    return (order_.size() + batch_size_ - 1) / batch_size_;
  }

  /// Builds a batch from explicit row ids.
  static void gather(const Dataset& data, std::span<const std::size_t> rows,
                     ExampleBatch& batch) {
    batch.ids.assign(rows.begin(), rows.end());
    batch.labels.clear();
    batch.numeric.assign(data.numeric_width(), {});
    batch.indices.assign(data.categorical_width(), {});
    for (auto r : rows) {
      batch.labels.push_back(data.label(r));
      for (std::size_t f = 0; f < data.numeric_width(); ++f) {
        batch.numeric[f].push_back(data.numeric(r, f));
      }
      for (std::size_t f = 0; f < data.categorical_width(); ++f) {
        auto s = data.indices(r, f);
        batch.indices[f].emplace_back(s.begin(), s.end());
      }
    }
  }

 private:
  void fill(std::span<const std::size_t> rows, ExampleBatch& batch) const {
    gather(*data_, rows, batch);
  }

  const Dataset* data_;
  std::size_t batch_size_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

}  // namespace ssmctr
