#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "xtab/metrics.hpp"
#include "xtab/results.hpp"

namespace x = xtab;

namespace {

// Exhaustive O(n^2) pair-counting AUC oracle.
double brute_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    double num = 0;
    size_t n1 = 0, n0 = 0;
    for (int l : labels) (l ? n1 : n0)++;
    for (size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] != 1) continue;
        for (size_t j = 0; j < labels.size(); ++j) {
            if (labels[j] != 0) continue;
            if (scores[i] > scores[j]) num += 1.0;
            else if (scores[i] == scores[j]) num += 0.5;
        }
    }
    return num / (static_cast<double>(n1) * static_cast<double>(n0));
}

}  // namespace

TEST(Auc, TrivialCases) {
    EXPECT_DOUBLE_EQ(x::auc({0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1}), 1.0);
    EXPECT_DOUBLE_EQ(x::auc({0.3, 0.7}, {1, 0}), 0.0);
    EXPECT_THROW(x::auc({0.1, 0.2}, {1, 1}), x::MetricError);
    EXPECT_THROW(x::auc({0.1}, {0, 1}), x::MetricError);
}

TEST(Auc, MatchesBruteForceWithTies) {
    std::mt19937_64 rng(99);
    for (int trial = 0; trial < 300; ++trial) {
        const size_t n = 5 + rng() % 60;
        std::vector<double> scores(n);
        std::vector<int> labels(n);
        // coarse score grid injects plenty of ties
        std::uniform_int_distribution<int> grid(0, 7);
        std::uniform_int_distribution<int> coin(0, 1);
        bool has0 = false, has1 = false;
        for (size_t i = 0; i < n; ++i) {
            scores[i] = grid(rng) / 7.0;
            labels[i] = coin(rng);
            (labels[i] ? has1 : has0) = true;
        }
        if (!has0 || !has1) continue;
        EXPECT_NEAR(x::auc(scores, labels), brute_auc(scores, labels), 1e-12);
    }
}

TEST(Auc, InvariantUnderMonotoneTransform) {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> uni(-3, 3);
    std::vector<double> scores(50);
    std::vector<int> labels(50);
    for (size_t i = 0; i < 50; ++i) {
        scores[i] = uni(rng);
        labels[i] = i % 3 == 0;
    }
    auto base = x::auc(scores, labels);
    auto t1 = scores, t2 = scores;
    for (auto& s : t1) s = std::exp(s);
    for (auto& s : t2) s = 2.0 * std::atan(s) + 10.0;
    EXPECT_DOUBLE_EQ(x::auc(t1, labels), base);
    EXPECT_DOUBLE_EQ(x::auc(t2, labels), base);
}

TEST(LogLoss, ClosedForms) {
    EXPECT_NEAR(x::log_loss({{1.0, 0.0, 0.0}}, {0}), 0.0, 1e-12);
    EXPECT_NEAR(x::log_loss({{1.0 / 3, 1.0 / 3, 1.0 / 3}}, {1}), std::log(3.0), 1e-9);
    EXPECT_NEAR(x::log_loss({{0.0, 1.0}}, {0}), -std::log(1e-15), 1e-6);  // clip at 1e-15
    EXPECT_THROW(x::log_loss({{0.9, 0.3}}, {0}), x::MetricError);
    EXPECT_THROW(x::log_loss({{0.5, 0.5}}, {4}), x::MetricError);
}

TEST(Rmse, ClosedForms) {
    EXPECT_DOUBLE_EQ(x::rmse({1, 2, 3}, {1, 2, 3}), 0.0);
    EXPECT_NEAR(x::rmse({3, -4}, {0, 0}), std::sqrt(25.0 / 2.0), 1e-12);
    EXPECT_THROW(x::rmse({}, {}), x::MetricError);

    // constant-mean predictor scores the population std of the targets
    std::vector<double> targets{1, 2, 3, 4, 5, 10};
    double mean = 0;
    for (double t : targets) mean += t;
    mean /= targets.size();
    std::vector<double> preds(targets.size(), mean);
    double var = 0;
    for (double t : targets) var += (t - mean) * (t - mean);
    EXPECT_NEAR(x::rmse(preds, targets), std::sqrt(var / targets.size()), 1e-12);
}

TEST(RankModels, TieAveraging) {
    auto r = x::rank_models({0.9, 0.8, 0.8}, x::Direction::higher_better);
    EXPECT_EQ(r, (std::vector<double>{1, 2.5, 2.5}));
    auto r2 = x::rank_models({5, 5, 5, 5}, x::Direction::higher_better);
    EXPECT_EQ(r2, (std::vector<double>{2.5, 2.5, 2.5, 2.5}));
    auto r3 = x::rank_models({1, 2, 3}, x::Direction::lower_better);
    EXPECT_EQ(r3, (std::vector<double>{1, 2, 3}));
    EXPECT_THROW(x::rank_models({1.0}, x::Direction::higher_better), x::MetricError);
}

TEST(RankModels, SumIsAlwaysTriangular) {
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<int> grid(0, 4);
    for (int t = 0; t < 200; ++t) {
        const size_t m = 2 + rng() % 7;
        std::vector<double> vals(m);
        for (auto& v : vals) v = grid(rng) / 4.0;
        auto ranks = x::rank_models(vals, t % 2 ? x::Direction::higher_better : x::Direction::lower_better);
        double sum = 0;
        for (double r : ranks) sum += r;
        EXPECT_NEAR(sum, m * (m + 1) / 2.0, 1e-12);
    }
}

TEST(WinRate, TieCreditAndSelfComparison) {
    EXPECT_DOUBLE_EQ(x::win_rate({2, 3, 4}, {1, 2, 3}, x::Direction::higher_better), 1.0);
    EXPECT_DOUBLE_EQ(x::win_rate({1, 2}, {1, 2}, x::Direction::higher_better), 0.5);
    std::vector<double> model(10, 1.0), base(10, 0.0);
    for (int i = 7; i < 9; ++i) model[i] = -1.0;  // 2 losses
    model[9] = 0.0;                               // 1 tie
    EXPECT_DOUBLE_EQ(x::win_rate(model, base, x::Direction::higher_better), 0.75);
    EXPECT_DOUBLE_EQ(x::win_rate(model, model, x::Direction::higher_better), 0.5);
    EXPECT_THROW(x::win_rate({1}, {1, 2}, x::Direction::higher_better), x::MetricError);
}

TEST(MinMax, RescaleAndDegenerate) {
    EXPECT_EQ(x::minmax_normalize({2, 4, 6}, x::Direction::lower_better), (std::vector<double>{1, 0.5, 0}));
    EXPECT_EQ(x::minmax_normalize({5, 5, 5}, x::Direction::lower_better), (std::vector<double>{0.5, 0.5, 0.5}));
    EXPECT_EQ(x::minmax_normalize({0.6, 0.9}, x::Direction::higher_better), (std::vector<double>{0, 1}));
}

TEST(ErrorReduction, ClosedForms) {
    EXPECT_DOUBLE_EQ(x::error_reduction(0.4, 0.4, 0.1, 0.9), 0.0);
    EXPECT_DOUBLE_EQ(x::error_reduction(0.2, 0.6, 0.2, 0.6), -1.0);
    EXPECT_DOUBLE_EQ(x::error_reduction(0.3, 0.4, 0.2, 0.6), -0.25);
    EXPECT_DOUBLE_EQ(x::error_reduction(0.3, 0.4, 0.5, 0.5), 0.0);  // degenerate spread
}

namespace {

// Hand-built 6-model x 10-trial fixture plus a from-scratch aggregator used
// to cross-check aggregate_report value-for-value.
struct Fixture {
    std::vector<std::string> models{"baseline", "m1", "m2", "m3", "m4", "m5"};
    std::vector<x::MetricRecord> records;

    Fixture() {
        std::mt19937_64 rng(31337);
        std::uniform_int_distribution<int> grid(0, 9);
        for (int task = 0; task < 2; ++task) {
            const std::string metric = task == 0 ? "auc" : "rmse";
            for (int trial = 0; trial < 5; ++trial) {
                for (size_t mi = 0; mi < models.size(); ++mi) {
                    x::MetricRecord r;
                    r.task = "task" + std::to_string(task);
                    r.trial = trial;
                    r.model = models[mi];
                    r.metric = metric;
                    // coarse grid keeps ties in play
                    r.value = task == 0 ? 0.5 + 0.05 * grid(rng) : 1.0 + 0.25 * grid(rng);
                    r.regime = "light";
                    r.init = mi == 0 ? "random" : "checkpoint";
                    r.config_hash = "deadbeef";
                    records.push_back(r);
                }
            }
        }
    }
};

}  // namespace

TEST(Aggregate, MatchesBruteForceOnFixture) {
    Fixture fx;
    auto rep = x::aggregate_report(fx.records, "baseline");
    ASSERT_EQ(rep.complete_trials, 10u);
    ASSERT_EQ(rep.models.size(), 6u);

    // independent brute-force aggregation
    for (size_t mi = 0; mi < fx.models.size(); ++mi) {
        const auto& name = fx.models[mi];
        std::vector<double> ranks, norms, erreds;
        double wins = 0;
        int trials = 0;
        for (int task = 0; task < 2; ++task) {
            for (int trial = 0; trial < 5; ++trial) {
                std::vector<double> vals(6);
                for (const auto& r : fx.records)
                    if (r.task == "task" + std::to_string(task) && r.trial == trial)
                        for (size_t k = 0; k < 6; ++k)
                            if (r.model == fx.models[k]) vals[k] = r.value;
                const bool higher = task == 0;
                auto better = [&](double a, double b) { return higher ? a > b : a < b; };
                // rank by pair counting
                double rank = 1;
                for (size_t k = 0; k < 6; ++k) {
                    if (k == mi) continue;
                    if (better(vals[k], vals[mi])) rank += 1;
                    else if (vals[k] == vals[mi]) rank += 0.5;
                }
                ranks.push_back(rank);
                const double mn = *std::min_element(vals.begin(), vals.end());
                const double mx = *std::max_element(vals.begin(), vals.end());
                double norm = mn == mx ? 0.5 : (vals[mi] - mn) / (mx - mn);
                if (!higher && mn != mx) norm = 1.0 - norm;
                norms.push_back(norm);
                std::vector<double> errs(6);
                for (size_t k = 0; k < 6; ++k) errs[k] = higher ? 1.0 - vals[k] : vals[k];
                const double be = *std::min_element(errs.begin(), errs.end());
                const double we = *std::max_element(errs.begin(), errs.end());
                erreds.push_back(we > be ? (errs[mi] - errs[0]) / (we - be) : 0.0);
                if (vals[mi] == vals[0]) wins += 0.5;
                else if (better(vals[mi], vals[0])) wins += 1.0;
                ++trials;
            }
        }
        auto mean = [](const std::vector<double>& v) {
            double s = 0;
            for (double q : v) s += q;
            return s / v.size();
        };
        const auto& agg = *std::find_if(rep.models.begin(), rep.models.end(),
                                        [&](const auto& a) { return a.model == name; });
        EXPECT_NEAR(agg.mean_rank, mean(ranks), 1e-12) << name;
        EXPECT_NEAR(agg.mean_normalized, mean(norms), 1e-12) << name;
        EXPECT_NEAR(agg.mean_error_reduction, mean(erreds), 1e-12) << name;
        EXPECT_NEAR(agg.win_rate_vs_baseline, wins / trials, 1e-12) << name;
        double var = 0;
        const double mr = mean(ranks);
        for (double r : ranks) var += (r - mr) * (r - mr);
        EXPECT_NEAR(agg.rank_std, std::sqrt(var / ranks.size()), 1e-12) << name;
    }
}

TEST(Aggregate, RankRowsSumTriangular) {
    Fixture fx;
    auto rep = x::aggregate_report(fx.records, "baseline");
    std::map<std::pair<std::string, int>, double> sums;
    for (const auto& row : rep.rows) sums[{row.task, row.trial}] += row.rank;
    for (const auto& [key, sum] : sums) EXPECT_NEAR(sum, 21.0, 1e-12);  // 6*7/2
}

TEST(Aggregate, ErrorsOnBadInput) {
    EXPECT_THROW(x::aggregate_report({}, "baseline"), x::MetricError);
    Fixture fx;
    EXPECT_THROW(x::aggregate_report(fx.records, "nonexistent"), x::MetricError);
    // incomplete trials are dropped; all-incomplete errors
    std::vector<x::MetricRecord> lonely{fx.records[0]};
    lonely[0].model = "only";
    EXPECT_THROW(x::aggregate_report(lonely, "only"), x::MetricError);
}

TEST(Records, JsonlRoundTrip) {
    Fixture fx;
    auto path = (std::filesystem::temp_directory_path() / "xtab_records.jsonl").string();
    std::filesystem::remove(path);
    for (const auto& r : fx.records) x::append_record(path, r);
    auto back = x::read_records(path);
    ASSERT_EQ(back.size(), fx.records.size());
    for (size_t i = 0; i < back.size(); ++i) {
        EXPECT_EQ(back[i].task, fx.records[i].task);
        EXPECT_EQ(back[i].model, fx.records[i].model);
        EXPECT_DOUBLE_EQ(back[i].value, fx.records[i].value);
        EXPECT_EQ(back[i].config_hash, "deadbeef");
    }
    // schema-version mismatch is rejected
    std::ofstream bad(path, std::ios::app);
    bad << R"({"schema_version":99,"task":"t","trial":0,"model":"m","regime":"light","init":"random",)"
        << R"("metric":"auc","value":0.5,"seconds":0,"config_hash":"x"})" << "\n";
    bad.close();
    EXPECT_THROW(x::read_records(path), x::LoadError);
}
