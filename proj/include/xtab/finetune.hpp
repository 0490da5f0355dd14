#pragma once

// Downstream adaptation: fresh featurizer + supervised head, backbone
// warm-started from a checkpoint or random, then full-model training under
// the light / heavy / best regimes with validation-driven snapshot retrieval
// and (for the best regime) model soup.

#include <chrono>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "xtab/data.hpp"
#include "xtab/fedpretrain.hpp"
#include "xtab/metrics.hpp"
#include "xtab/objectives.hpp"
#include "xtab/tensor.hpp"

namespace xtab {

enum class Regime { light, heavy, best };
enum class InitKind { random, checkpoint };

inline const char* regime_name(Regime r) {
    switch (r) {
        case Regime::light: return "light";
        case Regime::heavy: return "heavy";
        default: return "best";
    }
}

inline Regime regime_from_name(const std::string& s) {
    if (s == "light") return Regime::light;
    if (s == "heavy") return Regime::heavy;
    if (s == "best") return Regime::best;
    throw ConfigError("unknown regime: " + s);
}

struct FinetuneConfig {
    Regime regime = Regime::light;
    double train_fraction = 1.0;  // (0,1]
    int batch_size = 128;
    double lr = 1e-4;
    double weight_decay = 1e-5;
    int hard_epoch_cap = 500;  // guards the "infinite epochs" regimes; <=0 disables
    uint64_t seed = 0;

    // regime-derived knobs
    int max_epochs() const {
        if (regime == Regime::light) return 3;
        return hard_epoch_cap > 0 ? hard_epoch_cap : std::numeric_limits<int>::max();
    }
    int patience() const { return regime == Regime::light ? 0 : (regime == Regime::heavy ? 3 : 20); }
    double val_check_interval() const { return regime == Regime::best ? 0.5 : 1.0; }
    int top_k() const { return regime == Regime::best ? 3 : 1; }

    void validate() const {
        if (train_fraction <= 0.0 || train_fraction > 1.0)
            throw ConfigError("train_fraction must be in (0,1], got " + std::to_string(train_fraction));
        if (batch_size <= 0) throw ConfigError("batch size must be positive");
    }
};

// ---------------------------------------------------------------------------
// early stopping
// ---------------------------------------------------------------------------

enum class StopDecision { continue_training, stop };

// Stop once `patience` consecutive checks have passed without a strict
// improvement over the best score so far (ties do not reset the counter).
inline StopDecision early_stop_check(const std::vector<double>& history, int patience, Direction dir) {
    if (history.empty()) throw UsageError("early_stop_check: empty history");
    if (patience <= 0) return StopDecision::continue_training;
    size_t best = 0;
    for (size_t i = 1; i < history.size(); ++i) {
        const bool better =
            dir == Direction::higher_better ? history[i] > history[best] : history[i] < history[best];
        if (better) best = i;
    }
    const size_t since_best = history.size() - 1 - best;
    return since_best >= static_cast<size_t>(patience) ? StopDecision::stop : StopDecision::continue_training;
}

// ---------------------------------------------------------------------------
// snapshot pool and model soup
// ---------------------------------------------------------------------------

template <class Real>
struct SnapshotPool {
    int capacity = 1;
    Direction dir = Direction::higher_better;
    // best-first
    std::vector<std::pair<double, ParamSet<Real>>> entries;

    void offer(double score, const ParamSet<Real>& params) {
        auto pos = entries.begin();
        while (pos != entries.end() &&
               (dir == Direction::higher_better ? pos->first >= score : pos->first <= score))
            ++pos;
        entries.emplace(pos, score, params.clone_values());
        if (entries.size() > static_cast<size_t>(capacity)) entries.pop_back();
    }
    double best_score() const { return entries.front().first; }
};

// Uniform soup: element-wise mean over structurally identical snapshots.
template <class Real>
ParamSet<Real> model_soup(const std::vector<const ParamSet<Real>*>& snapshots) {
    if (snapshots.empty()) throw UsageError("model_soup: no snapshots");
    ParamSet<Real> out = snapshots[0]->clone_values();
    for (auto& e : out) {
        auto& acc = e.tensor.data();
        for (size_t s = 1; s < snapshots.size(); ++s) {
            const auto& other = *snapshots[s];
            if (!other.has(e.name)) throw ShapeError("model_soup: snapshot missing tensor " + e.name);
            const auto& v = other.at(e.name).data();
            if (v.size() != acc.size()) throw ShapeError("model_soup: shape mismatch on " + e.name);
            for (size_t i = 0; i < acc.size(); ++i) acc[i] += v[i];
        }
        const Real inv = Real(1) / static_cast<Real>(snapshots.size());
        for (auto& v : acc) v *= inv;
    }
    return out;
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

// Task metric on one split, eval mode (no dropout, no tape). Regression
// predictions are de-standardized so RMSE is in original label units.
template <class Real>
double evaluate(TabularModel<Real>& m, const PreparedTable& table, const std::vector<size_t>& rows) {
    if (rows.empty()) throw UsageError("evaluate: empty split");
    NoGradGuard ng;
    const size_t bs = 256;
    std::vector<double> reg_preds, reg_targets, bin_scores;
    std::vector<int> cls_labels;
    std::vector<std::vector<double>> probs;

    for (size_t start = 0; start < rows.size(); start += bs) {
        std::vector<size_t> chunk(rows.begin() + static_cast<long>(start),
                                  rows.begin() + static_cast<long>(std::min(start + bs, rows.size())));
        auto batch = make_batch(table, chunk);
        auto out = mlp_head(m.params, names::sup_head, cls_output(model_tokens(m, batch, {})));
        const size_t B = chunk.size();
        switch (m.task) {
            case TaskType::regression:
                for (size_t b = 0; b < B; ++b) {
                    reg_preds.push_back(table.stats.destandardize_label(static_cast<double>(out.data()[b])));
                    reg_targets.push_back(table.label_raw[chunk[b]]);
                }
                break;
            case TaskType::binary:
                for (size_t b = 0; b < B; ++b) {
                    const double z = static_cast<double>(out.data()[b]);
                    bin_scores.push_back(1.0 / (1.0 + std::exp(-z)));
                    cls_labels.push_back(batch.y_cat[b]);
                }
                break;
            default: {
                const size_t C = out.dim(1);
                for (size_t b = 0; b < B; ++b) {
                    std::vector<double> row(C);
                    double mx = -1e300;
                    for (size_t c = 0; c < C; ++c) mx = std::max(mx, static_cast<double>(out.data()[b * C + c]));
                    double z = 0;
                    for (size_t c = 0; c < C; ++c) {
                        row[c] = std::exp(static_cast<double>(out.data()[b * C + c]) - mx);
                        z += row[c];
                    }
                    for (auto& p : row) p /= z;
                    probs.push_back(std::move(row));
                    cls_labels.push_back(batch.y_cat[b]);
                }
            }
        }
    }
    switch (m.task) {
        case TaskType::regression: return rmse(reg_preds, reg_targets);
        case TaskType::binary: return auc(bin_scores, cls_labels);
        default: return log_loss(probs, cls_labels);
    }
}

// ---------------------------------------------------------------------------
// finetuning
// ---------------------------------------------------------------------------

template <class Real>
struct FinetuneResult {
    MetricKind metric = MetricKind::rmse;
    double test_value = 0;
    double best_val = 0;
    int epochs = 0;
    int validations = 0;
    size_t train_rows = 0;  // after train_fraction subsampling
    double seconds = 0;
    std::vector<double> val_history;
    TabularModel<Real> model;  // best snapshot (or soup) applied
};

// Train all components on the task's training split; validate on schedule;
// return the best-validation snapshot (uniform soup of the top_k for the
// best regime) evaluated on the test split.
template <class Real>
FinetuneResult<Real> finetune(const TableDataset& task, uint64_t trial_seed, const FinetuneConfig& cfg,
                              const BackboneConfig& bb, const CheckpointData* ckpt = nullptr) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();

    TableDataset local = task;
    local.split = split_dataset(local.n_rows(), trial_seed);
    auto prepared = apply_preprocess(local, fit_preprocess(local));

    // optional subsampling of the training split only
    std::vector<size_t> train_rows = prepared.split.train;
    if (cfg.train_fraction < 1.0) {
        Rng rng = rng_stream(cfg.seed ^ trial_seed, stream_tag::subsample);
        std::shuffle(train_rows.begin(), train_rows.end(), rng);
        const size_t keep = std::max<size_t>(
            1, static_cast<size_t>(std::llround(cfg.train_fraction * static_cast<double>(train_rows.size()))));
        train_rows.resize(keep);
    }

    FinetuneResult<Real> res;
    res.metric = metric_for_task(prepared.task);
    res.train_rows = train_rows.size();
    const Direction dir = metric_direction(res.metric);

    ObjectiveConfig sup;
    sup.kind = ObjectiveKind::supervised;
    res.model = build_model<Real>(prepared, bb, sup, cfg.seed ^ trial_seed);
    if (ckpt) checkpoint_apply(*ckpt, bb, res.model.params);

    OptimizerState<Real> opt;
    opt.lr = static_cast<Real>(cfg.lr);
    opt.weight_decay = static_cast<Real>(cfg.weight_decay);

    BatchIterator it(train_rows, static_cast<size_t>(cfg.batch_size), true, cfg.seed ^ trial_seed);
    Rng drng = rng_stream(cfg.seed ^ trial_seed, stream_tag::dropout);

    SnapshotPool<Real> pool;
    pool.capacity = cfg.top_k();
    pool.dir = dir;
    std::vector<double> history;

    const size_t batches_per_epoch = it.batches_per_epoch();
    const size_t mid =
        cfg.val_check_interval() < 1.0 ? (batches_per_epoch + 1) / 2 : batches_per_epoch + 1;  // ceil(b/2)
    bool stopped = false;

    auto run_validation = [&] {
        const double score = evaluate(res.model, prepared, prepared.split.val);
        history.push_back(score);
        pool.offer(score, res.model.params);
        ++res.validations;
        if (cfg.patience() > 0 && early_stop_check(history, cfg.patience(), dir) == StopDecision::stop)
            stopped = true;
    };

    for (int epoch = 0; epoch < cfg.max_epochs() && !stopped; ++epoch) {
        size_t batch_idx = 0;
        for (auto rows = it.next(); !rows.empty(); rows = it.next()) {
            auto batch = make_batch(prepared, rows);
            auto loss = supervised_loss(res.model, batch, Forward{true, &drng});
            backward(loss);
            adamw_step(res.model.params, opt);
            ++batch_idx;
            if (batch_idx == mid && batch_idx < batches_per_epoch) {
                run_validation();  // mid-epoch check (best regime)
                if (stopped) break;
            }
        }
        ++res.epochs;
        if (!stopped) run_validation();
        it.advance_epoch();
    }

    // retrieve best snapshot / soup
    if (pool.entries.empty()) throw UsageError("finetune: no validation evaluations recorded");
    res.best_val = pool.best_score();
    res.val_history = history;
    if (pool.entries.size() == 1 || cfg.top_k() == 1) {
        for (auto& e : res.model.params) e.tensor.data() = pool.entries.front().second.at(e.name).data();
    } else {
        std::vector<const ParamSet<Real>*> snaps;
        for (const auto& [score, ps] : pool.entries) snaps.push_back(&ps);
        auto souped = model_soup(snaps);
        for (auto& e : res.model.params) e.tensor.data() = souped.at(e.name).data();
    }

    res.test_value = evaluate(res.model, prepared, prepared.split.test);
    res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
}

}  // namespace xtab
