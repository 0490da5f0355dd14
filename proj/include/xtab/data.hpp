#pragma once

// Table ingestion and the data-side pipeline: CSV loading with type
// inference, train/val/test splitting, train-only standardization, marginal
// resampling corruption, batching, and a latent-factor synthetic table
// generator used for desk-scale experiments.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "xtab/common.hpp"

namespace xtab {

enum class ColumnKind { numerical, categorical };
enum class ColumnRole { feature, label };
enum class TaskType { regression, binary, multiclass };

inline const char* task_name(TaskType t) {
    switch (t) {
        case TaskType::regression: return "regression";
        case TaskType::binary: return "binary";
        default: return "multiclass";
    }
}

struct ColumnSchema {
    std::string name;
    ColumnKind kind = ColumnKind::numerical;
    ColumnRole role = ColumnRole::feature;
    // categorical vocabulary in first-appearance order; two reserved slots
    // follow it: one for missing cells, one for categories unseen in train
    std::vector<std::string> categories;
    std::unordered_map<std::string, int32_t> value_to_index;

    int32_t missing_index() const { return static_cast<int32_t>(categories.size()); }
    int32_t unknown_index() const { return static_cast<int32_t>(categories.size()) + 1; }
    int32_t n_cat() const { return static_cast<int32_t>(categories.size()) + 2; }
};

struct ColumnData {
    std::vector<double> num;    // NaN marks a missing cell
    std::vector<int32_t> cat;   // missing cells already carry missing_index
};

struct SplitIndices {
    std::vector<size_t> train, val, test;
};

struct TableDataset {
    std::string name;
    std::vector<ColumnSchema> schema;
    std::vector<ColumnData> columns;  // parallel to schema
    TaskType task_type = TaskType::regression;
    SplitIndices split;

    size_t n_rows() const {
        if (schema.empty()) return 0;
        const auto& c = columns[0];
        return c.num.empty() ? c.cat.size() : c.num.size();
    }
    size_t label_index() const {
        for (size_t i = 0; i < schema.size(); ++i)
            if (schema[i].role == ColumnRole::label) return i;
        throw UsageError("dataset has no label column");
    }
    std::vector<size_t> feature_indices() const {
        std::vector<size_t> out;
        for (size_t i = 0; i < schema.size(); ++i)
            if (schema[i].role == ColumnRole::feature) out.push_back(i);
        return out;
    }
    int n_classes() const {
        const auto& lc = schema[label_index()];
        return lc.kind == ColumnKind::categorical ? static_cast<int>(lc.categories.size()) : 1;
    }
};

// ---------------------------------------------------------------------------
// CSV loading
// ---------------------------------------------------------------------------

struct SchemaOverride {
    std::unordered_map<std::string, ColumnKind> kinds;
    std::optional<std::string> label;  // column name; default: last column
};

namespace detail {

inline bool parse_csv_line(const std::string& line, std::vector<std::string>& out) {
    out.clear();
    std::string field;
    bool quoted = false;
    for (size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    field += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                field += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(field);
            field.clear();
        } else if (c != '\r') {
            field += c;
        }
    }
    out.push_back(field);
    return !quoted;
}

inline bool parse_number(const std::string& s, double& out) {
    if (s.empty()) return false;
    const char* begin = s.c_str();
    char* end = nullptr;
    out = std::strtod(begin, &end);
    while (end && *end && std::isspace(static_cast<unsigned char>(*end))) ++end;
    return end == begin + s.size();
}

}  // namespace detail

inline TableDataset load_csv(const std::string& path, const SchemaOverride& override_ = {}) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw LoadError(path + ": empty file");
    if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line.erase(0, 3);  // UTF-8 BOM

    std::vector<std::string> header;
    if (!detail::parse_csv_line(line, header)) throw LoadError(path + ": malformed header");
    const size_t ncols = header.size();
    if (ncols == 0) throw LoadError(path + ": no columns");

    std::vector<std::vector<std::string>> cells(ncols);
    std::vector<std::string> fields;
    size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() && in.eof()) break;
        if (!detail::parse_csv_line(line, fields))
            throw LoadError(path + ": unterminated quote at line " + std::to_string(line_no));
        if (fields.size() != ncols)
            throw LoadError(path + ": ragged row at line " + std::to_string(line_no) + " (got " +
                            std::to_string(fields.size()) + " fields, expected " + std::to_string(ncols) + ")");
        for (size_t c = 0; c < ncols; ++c) cells[c].push_back(fields[c]);
    }
    const size_t nrows = cells[0].size();
    if (nrows == 0) throw LoadError(path + ": no data rows");

    TableDataset ds;
    ds.name = path;
    ds.schema.resize(ncols);
    ds.columns.resize(ncols);

    std::string label_name = override_.label.value_or(header.back());
    bool label_seen = false;

    for (size_t c = 0; c < ncols; ++c) {
        auto& sch = ds.schema[c];
        sch.name = header[c];
        sch.role = (sch.name == label_name && !label_seen) ? ColumnRole::label : ColumnRole::feature;
        if (sch.role == ColumnRole::label) label_seen = true;

        // type: override wins, else numerical iff every non-missing cell parses
        auto it = override_.kinds.find(sch.name);
        if (it != override_.kinds.end()) {
            sch.kind = it->second;
        } else {
            sch.kind = ColumnKind::numerical;
            double tmp;
            bool any_value = false;
            for (const auto& s : cells[c]) {
                if (s.empty()) continue;
                any_value = true;
                if (!detail::parse_number(s, tmp)) {
                    sch.kind = ColumnKind::categorical;
                    break;
                }
            }
            if (!any_value) sch.kind = ColumnKind::numerical;  // all-missing column
        }

        if (sch.kind == ColumnKind::numerical) {
            auto& col = ds.columns[c].num;
            col.resize(nrows);
            for (size_t r = 0; r < nrows; ++r) {
                const auto& s = cells[c][r];
                if (s.empty()) {
                    if (sch.role == ColumnRole::label)
                        throw LoadError(path + ": missing label at data row " + std::to_string(r + 1));
                    col[r] = std::numeric_limits<double>::quiet_NaN();
                } else {
                    double v;
                    if (!detail::parse_number(s, v))
                        throw LoadError(path + ": non-numeric cell '" + s + "' in column " + sch.name);
                    col[r] = v;
                }
            }
        } else {
            auto& col = ds.columns[c].cat;
            col.resize(nrows);
            for (size_t r = 0; r < nrows; ++r) {
                const auto& s = cells[c][r];
                if (s.empty()) {
                    if (sch.role == ColumnRole::label)
                        throw LoadError(path + ": missing label at data row " + std::to_string(r + 1));
                    col[r] = -1;  // patched to missing_index below
                    continue;
                }
                auto [vit, inserted] = sch.value_to_index.try_emplace(s, static_cast<int32_t>(sch.categories.size()));
                if (inserted) sch.categories.push_back(s);
                col[r] = vit->second;
            }
            const int32_t miss = sch.missing_index();
            for (auto& v : col)
                if (v < 0) v = miss;
        }
    }
    if (!label_seen) throw LoadError(path + ": label column '" + label_name + "' not found");

    const auto& lc = ds.schema[ds.label_index()];
    if (lc.kind == ColumnKind::numerical) {
        ds.task_type = TaskType::regression;
    } else if (lc.categories.size() == 2) {
        ds.task_type = TaskType::binary;
    } else if (lc.categories.size() > 2) {
        ds.task_type = TaskType::multiclass;
    } else {
        throw LoadError(path + ": label column has a single category");
    }
    return ds;
}

// Sidecar format: {"label": "colname", "columns": {"name": "numerical"|"categorical", ...}}
// Parsed by the CLI layer (which owns the JSON dependency); the loader takes
// the decoded SchemaOverride.

// ---------------------------------------------------------------------------
// splitting
// ---------------------------------------------------------------------------

// 10% test, then 1/8 of the remainder for validation, rest train. The
// permutation is seeded by the trial, so different trials use different test
// folds.
inline SplitIndices split_dataset(size_t n_rows, uint64_t trial_seed) {
    if (n_rows < 10) throw UsageError("split_dataset: need at least 10 rows, got " + std::to_string(n_rows));
    const size_t n_test = static_cast<size_t>(std::llround(0.10 * static_cast<double>(n_rows)));
    const size_t rem = n_rows - n_test;
    const size_t n_val = static_cast<size_t>(std::llround(static_cast<double>(rem) / 8.0));
    std::vector<size_t> perm(n_rows);
    for (size_t i = 0; i < n_rows; ++i) perm[i] = i;
    Rng rng = rng_stream(trial_seed, 0xD5u);
    std::shuffle(perm.begin(), perm.end(), rng);
    SplitIndices out;
    out.test.assign(perm.begin(), perm.begin() + n_test);
    out.val.assign(perm.begin() + n_test, perm.begin() + n_test + n_val);
    out.train.assign(perm.begin() + n_test + n_val, perm.end());
    return out;
}

// ---------------------------------------------------------------------------
// preprocessing
// ---------------------------------------------------------------------------

struct PreprocessStats {
    // parallel to schema; identity entries for non-numerical columns
    std::vector<double> mean, stdev;
    // categorical: which vocabulary indices appear in the training split
    std::vector<std::vector<uint8_t>> seen_in_train;
    // empirical marginal pools over training rows, in preprocessed units
    std::vector<std::vector<double>> num_pool;
    std::vector<std::vector<int32_t>> cat_pool;
    double label_mean = 0.0, label_std = 1.0;  // regression labels

    double destandardize_label(double v) const { return v * label_std + label_mean; }
};

inline PreprocessStats fit_preprocess(const TableDataset& ds) {
    const auto& train = ds.split.train;
    if (train.empty()) throw UsageError("fit_preprocess: empty training split");
    PreprocessStats st;
    const size_t ncols = ds.schema.size();
    st.mean.assign(ncols, 0.0);
    st.stdev.assign(ncols, 1.0);
    st.seen_in_train.resize(ncols);
    st.num_pool.resize(ncols);
    st.cat_pool.resize(ncols);

    for (size_t c = 0; c < ncols; ++c) {
        const auto& sch = ds.schema[c];
        if (sch.kind == ColumnKind::numerical) {
            const auto& col = ds.columns[c].num;
            double sum = 0;
            size_t cnt = 0;
            for (size_t r : train) {
                if (std::isnan(col[r])) continue;
                sum += col[r];
                ++cnt;
            }
            const double mean = cnt ? sum / static_cast<double>(cnt) : 0.0;
            double var = 0;
            for (size_t r : train) {
                if (std::isnan(col[r])) continue;
                var += (col[r] - mean) * (col[r] - mean);
            }
            var = cnt ? var / static_cast<double>(cnt) : 0.0;  // population variance
            st.mean[c] = mean;
            st.stdev[c] = std::max(std::sqrt(var), 1e-8);
            if (sch.role == ColumnRole::label) {
                st.label_mean = st.mean[c];
                st.label_std = st.stdev[c];
            }
            auto& pool = st.num_pool[c];
            pool.reserve(train.size());
            for (size_t r : train) {
                const double raw = std::isnan(col[r]) ? mean : col[r];
                pool.push_back((raw - mean) / st.stdev[c]);
            }
        } else {
            const auto& col = ds.columns[c].cat;
            auto& seen = st.seen_in_train[c];
            seen.assign(static_cast<size_t>(sch.n_cat()), 0);
            auto& pool = st.cat_pool[c];
            pool.reserve(train.size());
            for (size_t r : train) {
                seen[static_cast<size_t>(col[r])] = 1;
                pool.push_back(col[r]);
            }
        }
    }
    return st;
}

// Fully transformed table: features standardized / index-mapped, ready for
// batching. Labels carry both views (standardized value for regression,
// class index otherwise).
struct PreparedTable {
    std::string name;
    TaskType task = TaskType::regression;
    SplitIndices split;
    std::vector<size_t> feature_schema;           // schema indices, schema order
    std::vector<ColumnKind> feature_kind;
    std::vector<int32_t> feature_n_cat;           // embedding rows incl. reserved
    std::vector<std::vector<double>> feat_num;    // per feature position
    std::vector<std::vector<int32_t>> feat_cat;
    std::vector<double> label_num;                // standardized (regression)
    std::vector<double> label_raw;                // original units (regression)
    std::vector<int32_t> label_cat;               // class index (classification)
    int n_classes = 1;
    PreprocessStats stats;

    size_t n_features() const { return feature_schema.size(); }
    size_t n_rows() const { return task == TaskType::regression ? label_num.size() : label_cat.size(); }
};

inline PreparedTable apply_preprocess(const TableDataset& ds, const PreprocessStats& st) {
    if (st.mean.size() != ds.schema.size()) throw UsageError("apply_preprocess: stats do not match schema");
    PreparedTable out;
    out.name = ds.name;
    out.task = ds.task_type;
    out.split = ds.split;
    out.stats = st;
    out.n_classes = ds.n_classes();
    const size_t nrows = ds.n_rows();
    const size_t label = ds.label_index();

    for (size_t c = 0; c < ds.schema.size(); ++c) {
        const auto& sch = ds.schema[c];
        if (sch.role == ColumnRole::label) continue;
        out.feature_schema.push_back(c);
        out.feature_kind.push_back(sch.kind);
        if (sch.kind == ColumnKind::numerical) {
            out.feature_n_cat.push_back(0);
            std::vector<double> col(nrows);
            const auto& raw = ds.columns[c].num;
            for (size_t r = 0; r < nrows; ++r)
                col[r] = std::isnan(raw[r]) ? 0.0 : (raw[r] - st.mean[c]) / st.stdev[c];
            out.feat_num.push_back(std::move(col));
            out.feat_cat.emplace_back();
        } else {
            out.feature_n_cat.push_back(sch.n_cat());
            std::vector<int32_t> col(nrows);
            const auto& raw = ds.columns[c].cat;
            const auto& seen = st.seen_in_train[c];
            const int32_t unknown = sch.unknown_index();
            const int32_t missing = sch.missing_index();
            for (size_t r = 0; r < nrows; ++r) {
                const int32_t v = raw[r];
                if (v == missing)
                    col[r] = missing;
                else
                    col[r] = seen[static_cast<size_t>(v)] ? v : unknown;
            }
            out.feat_cat.push_back(std::move(col));
            out.feat_num.emplace_back();
        }
    }

    if (ds.task_type == TaskType::regression) {
        const auto& raw = ds.columns[label].num;
        out.label_raw.assign(raw.begin(), raw.end());
        out.label_num.resize(nrows);
        for (size_t r = 0; r < nrows; ++r) out.label_num[r] = (raw[r] - st.label_mean) / st.label_std;
    } else {
        out.label_cat = ds.columns[label].cat;
    }
    return out;
}

// ---------------------------------------------------------------------------
// batching
// ---------------------------------------------------------------------------

struct RowBatch {
    size_t size = 0;
    std::vector<std::vector<double>> num;   // per feature position (empty for cat)
    std::vector<std::vector<int32_t>> cat;
    std::vector<double> y_num;
    std::vector<int32_t> y_cat;
};

inline RowBatch make_batch(const PreparedTable& t, const std::vector<size_t>& rows) {
    RowBatch b;
    b.size = rows.size();
    const size_t nf = t.n_features();
    b.num.resize(nf);
    b.cat.resize(nf);
    for (size_t f = 0; f < nf; ++f) {
        if (t.feature_kind[f] == ColumnKind::numerical) {
            b.num[f].reserve(rows.size());
            for (size_t r : rows) b.num[f].push_back(t.feat_num[f][r]);
        } else {
            b.cat[f].reserve(rows.size());
            for (size_t r : rows) b.cat[f].push_back(t.feat_cat[f][r]);
        }
    }
    if (t.task == TaskType::regression) {
        b.y_num.reserve(rows.size());
        for (size_t r : rows) b.y_num.push_back(t.label_num[r]);
    } else {
        b.y_cat.reserve(rows.size());
        for (size_t r : rows) b.y_cat.push_back(t.label_cat[r]);
    }
    return b;
}

// Seeded epoch iterator over one split. Every epoch reshuffles with a
// distinct but reproducible permutation; the final short batch is emitted.
class BatchIterator {
  public:
    BatchIterator(std::vector<size_t> indices, size_t batch_size, bool shuffle, uint64_t seed)
        : indices_(std::move(indices)), batch_size_(batch_size), shuffle_(shuffle), seed_(seed) {
        if (indices_.empty()) throw UsageError("BatchIterator: empty split");
        if (batch_size_ == 0) throw ConfigError("BatchIterator: batch size must be positive");
        start_epoch();
    }

    // next batch within the current epoch; empty when the epoch is exhausted
    std::vector<size_t> next() {
        if (pos_ >= indices_.size()) return {};
        const size_t end = std::min(pos_ + batch_size_, indices_.size());
        std::vector<size_t> out(order_.begin() + pos_, order_.begin() + end);
        pos_ = end;
        return out;
    }

    // infinite stream: recycles epochs so every client can take a fixed
    // number of steps regardless of table size
    std::vector<size_t> next_recycling() {
        auto b = next();
        if (b.empty()) {
            ++epoch_;
            start_epoch();
            b = next();
        }
        return b;
    }

    void advance_epoch() {
        ++epoch_;
        start_epoch();
    }

    size_t epoch() const { return epoch_; }
    size_t batches_per_epoch() const { return (indices_.size() + batch_size_ - 1) / batch_size_; }

  private:
    void start_epoch() {
        order_ = indices_;
        if (shuffle_) {
            Rng rng = rng_stream(seed_, stream_tag::batching + 0x1000 * (epoch_ + 1));
            std::shuffle(order_.begin(), order_.end(), rng);
        }
        pos_ = 0;
    }

    std::vector<size_t> indices_, order_;
    size_t batch_size_;
    bool shuffle_;
    uint64_t seed_;
    size_t epoch_ = 0;
    size_t pos_ = 0;
};

// ---------------------------------------------------------------------------
// corruption
// ---------------------------------------------------------------------------

struct CorruptionConfig {
    double ratio = 0.6;
};

struct CorruptedBatch {
    RowBatch rows;
    std::vector<uint8_t> mask;  // B x c, row-major; 1 = resampled
};

// Resample exactly round(ratio*c) distinct feature columns per row from each
// column's empirical training marginal.
inline CorruptedBatch corrupt_batch(const RowBatch& batch, const CorruptionConfig& cfg, const PreparedTable& table,
                                    Rng& rng) {
    if (cfg.ratio < 0.0 || cfg.ratio > 1.0)
        throw ConfigError("corruption ratio must be in [0,1], got " + std::to_string(cfg.ratio));
    const size_t c = table.n_features();
    const size_t k = static_cast<size_t>(std::llround(cfg.ratio * static_cast<double>(c)));
    CorruptedBatch out;
    out.rows = batch;
    out.mask.assign(batch.size * c, 0);
    if (k == 0) return out;

    std::vector<size_t> cols(c);
    for (size_t b = 0; b < batch.size; ++b) {
        for (size_t i = 0; i < c; ++i) cols[i] = i;
        // partial Fisher-Yates: first k entries are a uniform k-subset
        for (size_t i = 0; i < k; ++i) {
            std::uniform_int_distribution<size_t> pick(i, c - 1);
            std::swap(cols[i], cols[pick(rng)]);
        }
        for (size_t i = 0; i < k; ++i) {
            const size_t f = cols[i];
            out.mask[b * c + f] = 1;
            const size_t schema_col = table.feature_schema[f];
            if (table.feature_kind[f] == ColumnKind::numerical) {
                const auto& pool = table.stats.num_pool[schema_col];
                std::uniform_int_distribution<size_t> draw(0, pool.size() - 1);
                out.rows.num[f][b] = pool[draw(rng)];
            } else {
                const auto& pool = table.stats.cat_pool[schema_col];
                std::uniform_int_distribution<size_t> draw(0, pool.size() - 1);
                out.rows.cat[f][b] = pool[draw(rng)];
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// synthetic suite
// ---------------------------------------------------------------------------

struct SyntheticSpec {
    int n_tables = 12;
    int rows = 600;
    int cols = 8;
    int latent_dim = 4;
    uint64_t seed = 0;
    double cat_fraction = 0.25;
    double noise = 0.3;        // column observation noise
    double label_noise = 0.2;  // label noise
};

// Tables drawn from one shared latent linear-factor model. Each table gets
// its own random column mixes, column count, scale/offset per column, task
// type, and a slice of quantile-binned categorical columns. latent_dim = 0
// degenerates to pure noise (labels carry no signal).
inline std::vector<TableDataset> generate_synthetic_suite(const SyntheticSpec& spec) {
    if (spec.n_tables <= 0 || spec.rows <= 0 || spec.cols <= 0)
        throw ConfigError("generate_synthetic_suite: sizes must be positive");
    std::vector<TableDataset> out;
    out.reserve(static_cast<size_t>(spec.n_tables));

    for (int t = 0; t < spec.n_tables; ++t) {
        Rng rng = rng_stream(spec.seed, stream_tag::data_gen + static_cast<uint64_t>(t));
        std::normal_distribution<double> gauss(0.0, 1.0);
        std::uniform_real_distribution<double> uni(0.0, 1.0);

        const int cmin = std::max(2, spec.cols / 2);
        const int c = cmin + static_cast<int>(rng() % static_cast<uint64_t>(spec.cols - cmin + 1));
        const int L = spec.latent_dim;
        const size_t n = static_cast<size_t>(spec.rows);

        // table-specific mixing vectors and label direction(s)
        std::vector<std::vector<double>> mix(static_cast<size_t>(c), std::vector<double>(std::max(L, 1), 0.0));
        for (auto& m : mix)
            for (auto& v : m) v = gauss(rng);
        TaskType task = t % 3 == 0 ? TaskType::regression : (t % 3 == 1 ? TaskType::binary : TaskType::multiclass);
        const int n_classes = task == TaskType::multiclass ? 3 : 2;
        std::vector<std::vector<double>> label_dir(static_cast<size_t>(n_classes),
                                                   std::vector<double>(std::max(L, 1), 0.0));
        for (auto& m : label_dir)
            for (auto& v : m) v = gauss(rng);

        std::vector<double> col_scale(static_cast<size_t>(c)), col_shift(static_cast<size_t>(c));
        for (int j = 0; j < c; ++j) {
            col_scale[static_cast<size_t>(j)] = 0.5 + 1.5 * uni(rng);
            col_shift[static_cast<size_t>(j)] = -1.0 + 2.0 * uni(rng);
        }

        // raw latent draws and column values
        std::vector<std::vector<double>> cols(static_cast<size_t>(c), std::vector<double>(n));
        std::vector<double> y_reg(n);
        std::vector<int32_t> y_cls(n);
        std::vector<double> h(static_cast<size_t>(std::max(L, 1)));
        for (size_t r = 0; r < n; ++r) {
            for (auto& v : h) v = gauss(rng);
            for (int j = 0; j < c; ++j) {
                double v = spec.noise * gauss(rng);
                if (L > 0)
                    for (int l = 0; l < L; ++l) v += mix[static_cast<size_t>(j)][static_cast<size_t>(l)] * h[static_cast<size_t>(l)];
                cols[static_cast<size_t>(j)][r] = col_scale[static_cast<size_t>(j)] * v + col_shift[static_cast<size_t>(j)];
            }
            if (L == 0) {
                // pure-noise labels
                y_reg[r] = gauss(rng);
                y_cls[r] = static_cast<int32_t>(rng() % static_cast<uint64_t>(n_classes));
            } else {
                std::vector<double> scores(static_cast<size_t>(n_classes));
                for (int k = 0; k < n_classes; ++k) {
                    double s = spec.label_noise * gauss(rng);
                    for (int l = 0; l < L; ++l) s += label_dir[static_cast<size_t>(k)][static_cast<size_t>(l)] * h[static_cast<size_t>(l)];
                    scores[static_cast<size_t>(k)] = s;
                }
                y_reg[r] = 3.0 * scores[0] + 5.0;  // non-unit units exercise destandardization
                y_cls[r] = static_cast<int32_t>(std::max_element(scores.begin(), scores.end()) - scores.begin());
                if (task == TaskType::binary) y_cls[r] = scores[0] > scores[1] ? 1 : 0;
            }
        }

        TableDataset ds;
        ds.name = "synth" + std::to_string(t);
        ds.task_type = task;
        const int n_catcols = static_cast<int>(std::floor(spec.cat_fraction * c));
        for (int j = 0; j < c; ++j) {
            ColumnSchema sch;
            sch.name = "f" + std::to_string(j);
            ColumnData data;
            if (j < n_catcols) {
                // quantile binning hides the ordinal structure as categories
                const int bins = 3 + static_cast<int>(rng() % 3);
                sch.kind = ColumnKind::categorical;
                for (int q = 0; q < bins; ++q) {
                    sch.value_to_index["q" + std::to_string(q)] = q;
                    sch.categories.push_back("q" + std::to_string(q));
                }
                std::vector<double> sorted = cols[static_cast<size_t>(j)];
                std::sort(sorted.begin(), sorted.end());
                data.cat.resize(n);
                for (size_t r = 0; r < n; ++r) {
                    const double v = cols[static_cast<size_t>(j)][r];
                    const size_t rank = static_cast<size_t>(std::lower_bound(sorted.begin(), sorted.end(), v) -
                                                            sorted.begin());
                    int q = static_cast<int>(rank * static_cast<size_t>(bins) / n);
                    q = std::min(q, bins - 1);
                    data.cat[r] = q;
                }
            } else {
                sch.kind = ColumnKind::numerical;
                data.num = cols[static_cast<size_t>(j)];
            }
            ds.schema.push_back(std::move(sch));
            ds.columns.push_back(std::move(data));
        }

        ColumnSchema label;
        label.name = "target";
        label.role = ColumnRole::label;
        ColumnData ldata;
        if (task == TaskType::regression) {
            label.kind = ColumnKind::numerical;
            ldata.num = y_reg;
        } else {
            label.kind = ColumnKind::categorical;
            for (int k = 0; k < n_classes; ++k) {
                label.value_to_index["c" + std::to_string(k)] = k;
                label.categories.push_back("c" + std::to_string(k));
            }
            ldata.cat = y_cls;
        }
        ds.schema.push_back(std::move(label));
        ds.columns.push_back(std::move(ldata));
        out.push_back(std::move(ds));
    }
    return out;
}

// CSV export, mainly so the synthetic suite can round-trip through the same
// ingestion path real tables use.
inline void write_csv(const TableDataset& ds, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw LoadError("cannot write " + path);
    for (size_t c = 0; c < ds.schema.size(); ++c) out << (c ? "," : "") << ds.schema[c].name;
    out << "\n";
    const size_t n = ds.n_rows();
    for (size_t r = 0; r < n; ++r) {
        for (size_t c = 0; c < ds.schema.size(); ++c) {
            if (c) out << ",";
            const auto& sch = ds.schema[c];
            if (sch.kind == ColumnKind::numerical) {
                const double v = ds.columns[c].num[r];
                if (!std::isnan(v)) {
                    std::ostringstream ss;
                    ss.precision(17);
                    ss << v;
                    out << ss.str();
                }
            } else {
                const int32_t v = ds.columns[c].cat[r];
                if (v < sch.missing_index()) out << sch.categories[static_cast<size_t>(v)];
            }
        }
        out << "\n";
    }
}

}  // namespace xtab
