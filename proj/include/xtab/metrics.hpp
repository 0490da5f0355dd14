#pragma once

// Task metrics (AUC, log loss, RMSE) and the cross-model aggregation
// statistics used for reporting: tie-averaged ranks, win rates, min-max
// normalized performance, and error-reduction rates. Pure functions over
// plain records.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "xtab/common.hpp"
#include "xtab/data.hpp"

namespace xtab {

enum class MetricKind { auc, logloss, rmse };
enum class Direction { higher_better, lower_better };

inline const char* metric_name(MetricKind m) {
    switch (m) {
        case MetricKind::auc: return "auc";
        case MetricKind::logloss: return "logloss";
        default: return "rmse";
    }
}

inline MetricKind metric_from_name(const std::string& s) {
    if (s == "auc") return MetricKind::auc;
    if (s == "logloss") return MetricKind::logloss;
    if (s == "rmse") return MetricKind::rmse;
    throw MetricError("unknown metric: " + s);
}

inline MetricKind metric_for_task(TaskType t) {
    switch (t) {
        case TaskType::binary: return MetricKind::auc;
        case TaskType::multiclass: return MetricKind::logloss;
        default: return MetricKind::rmse;
    }
}

inline Direction metric_direction(MetricKind m) {
    return m == MetricKind::auc ? Direction::higher_better : Direction::lower_better;
}

// ---------------------------------------------------------------------------
// task metrics
// ---------------------------------------------------------------------------

// ROC AUC via the Mann-Whitney statistic with tie-averaged ranks; equals
// (#concordant pairs + 0.5 * #tied pairs) / (n1 * n0).
inline double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) throw MetricError("auc: length mismatch");
    const size_t n = scores.size();
    size_t n1 = 0;
    for (int l : labels) {
        if (l != 0 && l != 1) throw MetricError("auc: labels must be 0/1");
        n1 += static_cast<size_t>(l);
    }
    const size_t n0 = n - n1;
    if (n1 == 0 || n0 == 0) throw MetricError("auc: both classes must be present");

    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] < scores[b]; });
    double rank_sum_pos = 0;
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));  // 1-based
        for (size_t k = i; k < j; ++k)
            if (labels[order[k]] == 1) rank_sum_pos += avg_rank;
        i = j;
    }
    return (rank_sum_pos - 0.5 * static_cast<double>(n1) * static_cast<double>(n1 + 1)) /
           (static_cast<double>(n1) * static_cast<double>(n0));
}

// Multiclass log loss with probabilities clipped to [1e-15, 1 - 1e-15].
inline double log_loss(const std::vector<std::vector<double>>& probs, const std::vector<int>& labels) {
    if (probs.size() != labels.size() || probs.empty()) throw MetricError("log_loss: bad inputs");
    double acc = 0;
    for (size_t b = 0; b < probs.size(); ++b) {
        const auto& row = probs[b];
        double sum = 0;
        for (double p : row) sum += p;
        if (std::abs(sum - 1.0) > 1e-6) throw MetricError("log_loss: probability row does not sum to 1");
        const int y = labels[b];
        if (y < 0 || static_cast<size_t>(y) >= row.size()) throw MetricError("log_loss: label out of range");
        const double p = std::clamp(row[static_cast<size_t>(y)], 1e-15, 1.0 - 1e-15);
        acc -= std::log(p);
    }
    return acc / static_cast<double>(probs.size());
}

inline double rmse(const std::vector<double>& preds, const std::vector<double>& targets) {
    if (preds.size() != targets.size()) throw MetricError("rmse: length mismatch");
    if (preds.empty()) throw MetricError("rmse: empty input");
    double acc = 0;
    for (size_t i = 0; i < preds.size(); ++i) acc += (preds[i] - targets[i]) * (preds[i] - targets[i]);
    return std::sqrt(acc / static_cast<double>(preds.size()));
}

// ---------------------------------------------------------------------------
// cross-model aggregation
// ---------------------------------------------------------------------------

// Tie-averaged ranks, best = 1.
inline std::vector<double> rank_models(const std::vector<double>& values, Direction dir) {
    const size_t m = values.size();
    if (m < 2) throw MetricError("rank_models: need at least two models");
    std::vector<size_t> order(m);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        return dir == Direction::higher_better ? values[a] > values[b] : values[a] < values[b];
    });
    std::vector<double> ranks(m, 0.0);
    size_t i = 0;
    while (i < m) {
        size_t j = i;
        while (j < m && values[order[j]] == values[order[i]]) ++j;
        const double avg = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
        for (size_t k = i; k < j; ++k) ranks[order[k]] = avg;
        i = j;
    }
    return ranks;
}

// Fraction of paired trials won; ties credit 0.5.
inline double win_rate(const std::vector<double>& model_vals, const std::vector<double>& baseline_vals,
                       Direction dir) {
    if (model_vals.size() != baseline_vals.size() || model_vals.empty())
        throw MetricError("win_rate: unpaired records");
    double wins = 0;
    for (size_t i = 0; i < model_vals.size(); ++i) {
        if (model_vals[i] == baseline_vals[i])
            wins += 0.5;
        else if ((dir == Direction::higher_better) == (model_vals[i] > baseline_vals[i]))
            wins += 1.0;
    }
    return wins / static_cast<double>(model_vals.size());
}

// Linear rescale to [0,1] with best = 1, worst = 0; a degenerate all-equal
// trial maps everyone to 0.5.
inline std::vector<double> minmax_normalize(const std::vector<double>& values, Direction dir) {
    if (values.size() < 2) throw MetricError("minmax_normalize: need at least two models");
    const auto [mn_it, mx_it] = std::minmax_element(values.begin(), values.end());
    const double mn = *mn_it, mx = *mx_it;
    std::vector<double> out(values.size());
    if (mn == mx) {
        std::fill(out.begin(), out.end(), 0.5);
        return out;
    }
    for (size_t i = 0; i < values.size(); ++i) {
        const double s = (values[i] - mn) / (mx - mn);
        out[i] = dir == Direction::higher_better ? s : 1.0 - s;
    }
    return out;
}

// (model_err - baseline_err) / (worst_err - best_err); negative means the
// model beats the baseline. Degenerate spread returns 0.
inline double error_reduction(double model_err, double baseline_err, double best_err, double worst_err) {
    if (worst_err <= best_err) return 0.0;
    return (model_err - baseline_err) / (worst_err - best_err);
}

// ---------------------------------------------------------------------------
// record-level aggregation
// ---------------------------------------------------------------------------

struct MetricRecord {
    int schema_version = 1;
    std::string task;
    int trial = 0;
    std::string model;
    std::string regime;
    std::string init;
    std::string metric;  // auc | logloss | rmse
    double value = 0;
    double seconds = 0;
    std::string config_hash;
};

struct TrialRow {
    std::string task;
    int trial;
    std::string model;
    std::string metric;
    double value;
    double rank;
    double normalized;
    double err_reduction;
};

struct ModelAggregate {
    std::string model;
    int trials = 0;
    double win_rate_vs_baseline = 0;
    double mean_rank = 0;
    double rank_std = 0;
    double mean_normalized = 0;
    double mean_error_reduction = 0;
};

struct AggregateReport {
    std::string baseline;
    std::vector<ModelAggregate> models;
    std::vector<TrialRow> rows;  // per-trial detail for CSV export
    size_t complete_trials = 0;
    size_t dropped_trials = 0;
};

inline double metric_error_value(MetricKind kind, double value) {
    return kind == MetricKind::auc ? 1.0 - value : value;
}

// Aggregates a flat record list. Only trials carrying a value for every
// model enter the rank/normalization statistics; win rate pairs each model
// with the baseline per trial.
inline AggregateReport aggregate_report(const std::vector<MetricRecord>& records, const std::string& baseline) {
    if (records.empty()) throw MetricError("aggregate_report: no records");
    std::vector<std::string> models;
    for (const auto& r : records)
        if (std::find(models.begin(), models.end(), r.model) == models.end()) models.push_back(r.model);
    if (std::find(models.begin(), models.end(), baseline) == models.end())
        throw MetricError("aggregate_report: baseline model '" + baseline + "' not present in records");

    struct TrialData {
        std::map<std::string, double> values;
        std::string metric;
    };
    std::map<std::pair<std::string, int>, TrialData> trials;
    for (const auto& r : records) {
        auto& t = trials[{r.task, r.trial}];
        t.values[r.model] = r.value;
        t.metric = r.metric;
    }

    AggregateReport rep;
    rep.baseline = baseline;
    const size_t m = models.size();
    std::map<std::string, std::vector<double>> ranks_by_model, norm_by_model, errred_by_model;
    std::map<std::string, std::vector<double>> model_vals, base_vals;

    for (const auto& [key, t] : trials) {
        if (t.values.size() != m) {
            ++rep.dropped_trials;
            continue;
        }
        ++rep.complete_trials;
        const MetricKind kind = metric_from_name(t.metric);
        const Direction dir = metric_direction(kind);
        std::vector<double> vals(m);
        for (size_t i = 0; i < m; ++i) vals[i] = t.values.at(models[i]);
        auto ranks = rank_models(vals, dir);
        auto norm = minmax_normalize(vals, dir);
        std::vector<double> errs(m);
        for (size_t i = 0; i < m; ++i) errs[i] = metric_error_value(kind, vals[i]);
        const double best_err = *std::min_element(errs.begin(), errs.end());
        const double worst_err = *std::max_element(errs.begin(), errs.end());
        const double base_err = metric_error_value(kind, t.values.at(baseline));

        for (size_t i = 0; i < m; ++i) {
            const double er = error_reduction(errs[i], base_err, best_err, worst_err);
            ranks_by_model[models[i]].push_back(ranks[i]);
            norm_by_model[models[i]].push_back(norm[i]);
            errred_by_model[models[i]].push_back(er);
            model_vals[models[i]].push_back(vals[i]);
            base_vals[models[i]].push_back(t.values.at(baseline));
            rep.rows.push_back(TrialRow{key.first, key.second, models[i], t.metric, vals[i], ranks[i], norm[i], er});
        }
    }
    if (rep.complete_trials == 0) throw MetricError("aggregate_report: no complete trials across all models");

    // direction varies per trial metric; win rate needs it per pair, so
    // recompute pairwise with the right direction per trial
    std::map<std::string, double> wins;
    std::map<std::string, int> win_counts;
    for (const auto& [key, t] : trials) {
        if (t.values.size() != m) continue;
        const Direction dir = metric_direction(metric_from_name(t.metric));
        for (const auto& name : models) {
            const double mv = t.values.at(name), bv = t.values.at(baseline);
            double w = mv == bv ? 0.5 : (((dir == Direction::higher_better) == (mv > bv)) ? 1.0 : 0.0);
            wins[name] += w;
            win_counts[name] += 1;
        }
    }

    for (const auto& name : models) {
        ModelAggregate agg;
        agg.model = name;
        const auto& rk = ranks_by_model[name];
        agg.trials = static_cast<int>(rk.size());
        agg.win_rate_vs_baseline = wins[name] / std::max(1, win_counts[name]);
        double mean_rank = 0;
        for (double r : rk) mean_rank += r;
        mean_rank /= static_cast<double>(rk.size());
        double var = 0;
        for (double r : rk) var += (r - mean_rank) * (r - mean_rank);
        agg.mean_rank = mean_rank;
        agg.rank_std = std::sqrt(var / static_cast<double>(rk.size()));
        double mn = 0;
        for (double v : norm_by_model[name]) mn += v;
        agg.mean_normalized = mn / static_cast<double>(rk.size());
        double er = 0;
        for (double v : errred_by_model[name]) er += v;
        agg.mean_error_reduction = er / static_cast<double>(rk.size());
        rep.models.push_back(agg);
    }
    return rep;
}

}  // namespace xtab
