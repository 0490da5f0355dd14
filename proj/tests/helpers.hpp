#pragma once

// Shared fixtures: quick synthetic tables with controlled column layouts.

#include <string>
#include <vector>

#include "xtab/data.hpp"

namespace helpers {

// Random table with the requested column kinds (label appended last),
// already split and preprocessed.
inline xtab::PreparedTable make_prepared(size_t n_rows, const std::vector<xtab::ColumnKind>& kinds,
                                         xtab::TaskType task, uint64_t seed, int n_classes = 3) {
    xtab::TableDataset ds;
    ds.name = "fixture";
    ds.task_type = task;
    xtab::Rng rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (size_t k = 0; k < kinds.size(); ++k) {
        xtab::ColumnSchema sch;
        sch.name = "f" + std::to_string(k);
        sch.kind = kinds[k];
        xtab::ColumnData col;
        if (kinds[k] == xtab::ColumnKind::numerical) {
            col.num.resize(n_rows);
            for (auto& v : col.num) v = 2.0 * gauss(rng) + 1.0;
        } else {
            const int vocab = 2;
            for (int q = 0; q < vocab; ++q) {
                sch.value_to_index["v" + std::to_string(q)] = q;
                sch.categories.push_back("v" + std::to_string(q));
            }
            col.cat.resize(n_rows);
            for (auto& v : col.cat) v = static_cast<int32_t>(rng() % vocab);
        }
        ds.schema.push_back(std::move(sch));
        ds.columns.push_back(std::move(col));
    }
    xtab::ColumnSchema label;
    label.name = "y";
    label.role = xtab::ColumnRole::label;
    xtab::ColumnData lcol;
    if (task == xtab::TaskType::regression) {
        label.kind = xtab::ColumnKind::numerical;
        lcol.num.resize(n_rows);
        for (auto& v : lcol.num) v = 3.0 * gauss(rng);
    } else {
        label.kind = xtab::ColumnKind::categorical;
        const int classes = task == xtab::TaskType::binary ? 2 : n_classes;
        for (int q = 0; q < classes; ++q) {
            label.value_to_index["c" + std::to_string(q)] = q;
            label.categories.push_back("c" + std::to_string(q));
        }
        lcol.cat.resize(n_rows);
        for (auto& v : lcol.cat) v = static_cast<int32_t>(rng() % classes);
    }
    ds.schema.push_back(std::move(label));
    ds.columns.push_back(std::move(lcol));
    ds.split = xtab::split_dataset(n_rows, seed);
    return xtab::apply_preprocess(ds, xtab::fit_preprocess(ds));
}

inline std::vector<size_t> first_rows(size_t n) {
    std::vector<size_t> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = i;
    return out;
}

}  // namespace helpers
