#pragma once

// Pretraining objectives and their data-specific projection heads. Heads are
// 2-layer ReLU networks and never leave the client; the reconstruction
// objective reads per-column tokens, contrastive and supervised objectives
// read the CLS output.

#include <string>
#include <vector>

#include "xtab/data.hpp"
#include "xtab/model.hpp"
#include "xtab/tensor.hpp"

namespace xtab {

enum class ObjectiveKind { reconstruction, contrastive, supervised };

inline const char* objective_name(ObjectiveKind k) {
    switch (k) {
        case ObjectiveKind::reconstruction: return "reconstruction";
        case ObjectiveKind::contrastive: return "contrastive";
        default: return "supervised";
    }
}

inline ObjectiveKind objective_from_name(const std::string& s) {
    if (s == "reconstruction") return ObjectiveKind::reconstruction;
    if (s == "contrastive") return ObjectiveKind::contrastive;
    if (s == "supervised") return ObjectiveKind::supervised;
    throw ConfigError("unknown objective: " + s);
}

struct ObjectiveConfig {
    ObjectiveKind kind = ObjectiveKind::reconstruction;
    double tau = 1.0;                // InfoNCE temperature
    CorruptionConfig corruption{};   // recon/contrastive corruption
    bool masked_only = false;        // reconstruct only resampled cells
    int contrastive_dim = 192;       // z dimension
};

// ---------------------------------------------------------------------------
// projection heads
// ---------------------------------------------------------------------------

template <class Real>
void add_mlp_head(ParamSet<Real>& ps, const std::string& name, int in, int hidden, int out, Rng& rng) {
    add_linear(ps, name + ".l1", in, hidden, rng, false, true);
    add_linear(ps, name + ".l2", hidden, out, rng, false, true);
}

template <class Real>
Tensor<Real> mlp_head(ParamSet<Real>& ps, const std::string& name, const Tensor<Real>& x) {
    return apply_linear(ps, name + ".l2", relu(apply_linear(ps, name + ".l1", x)));
}

namespace names {
inline std::string recon_head(size_t k) { return "head.recon.col" + std::to_string(k); }
inline constexpr const char* ctr_head = "head.ctr";
inline constexpr const char* sup_head = "head.sup";
}  // namespace names

// ---------------------------------------------------------------------------
// model bundle
// ---------------------------------------------------------------------------

// Featurizer + backbone + heads for one table, with the feature layout the
// featurizer was built for. The same bundle serves pretraining clients and
// finetune runs (the latter always carry a supervised head).
template <class Real>
struct TabularModel {
    BackboneConfig cfg;
    ObjectiveConfig obj;
    std::vector<ColumnKind> feature_kind;
    std::vector<int32_t> feature_n_cat;
    TaskType task = TaskType::regression;
    int n_classes = 1;
    ParamSet<Real> params;
};

template <class Real>
TabularModel<Real> build_model(const PreparedTable& table, const BackboneConfig& cfg, const ObjectiveConfig& obj,
                               uint64_t seed) {
    cfg.validate();
    TabularModel<Real> m;
    m.cfg = cfg;
    m.obj = obj;
    m.feature_kind = table.feature_kind;
    m.feature_n_cat = table.feature_n_cat;
    m.task = table.task;
    m.n_classes = table.n_classes;

    Rng feat_rng = rng_stream(seed, stream_tag::featurizer_init);
    build_featurizer(m.params, m.feature_kind, m.feature_n_cat, cfg, feat_rng);
    Rng bb_rng = rng_stream(seed, stream_tag::backbone_init);
    build_backbone(m.params, cfg, bb_rng);
    Rng head_rng = rng_stream(seed, stream_tag::head_init);
    switch (obj.kind) {
        case ObjectiveKind::reconstruction:
            for (size_t k = 0; k < m.feature_kind.size(); ++k) {
                const int out = m.feature_kind[k] == ColumnKind::numerical ? 1 : m.feature_n_cat[k];
                add_mlp_head(m.params, names::recon_head(k), cfg.d, cfg.head_hidden, out, head_rng);
            }
            break;
        case ObjectiveKind::contrastive:
            add_mlp_head(m.params, names::ctr_head, cfg.d, cfg.head_hidden, obj.contrastive_dim, head_rng);
            break;
        case ObjectiveKind::supervised: {
            const int out = m.task == TaskType::multiclass ? m.n_classes : 1;
            add_mlp_head(m.params, names::sup_head, cfg.d, cfg.head_hidden, out, head_rng);
            break;
        }
    }
    return m;
}

template <class Real>
Tensor<Real> model_tokens(TabularModel<Real>& m, const RowBatch& batch, const Forward& fwd) {
    return backbone_forward(m.params, m.cfg, featurize<Real>(m.params, m.feature_kind, batch, m.cfg), fwd);
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

// Recover the original row from the corrupted view. Per-column heads read the
// column's contextual token; the loss is mean MSE over numerical columns plus
// mean cross-entropy over categorical columns. With masked_only set, each
// column averages over its resampled cells only.
template <class Real>
Tensor<Real> reconstruction_loss(TabularModel<Real>& m, const RowBatch& original, const CorruptedBatch& corrupted,
                                 const Forward& fwd) {
    auto tokens = model_tokens(m, corrupted.rows, fwd);
    const size_t B = original.size;
    const size_t c = m.feature_kind.size();

    Tensor<Real> num_sum, cat_sum;
    size_t n_num = 0, n_cat = 0;
    for (size_t k = 0; k < c; ++k) {
        auto out = mlp_head(m.params, names::recon_head(k), token_at(tokens, k));
        Tensor<Real> col_loss;
        if (m.feature_kind[k] == ColumnKind::numerical) {
            std::vector<Real> target(B);
            for (size_t b = 0; b < B; ++b) target[b] = static_cast<Real>(original.num[k][b]);
            auto pred = reshape(out, {B});
            if (m.obj.masked_only) {
                std::vector<Real> mask(B);
                Real cnt = 0;
                for (size_t b = 0; b < B; ++b) {
                    mask[b] = static_cast<Real>(corrupted.mask[b * c + k]);
                    cnt += mask[b];
                }
                auto diff = sub(pred, Tensor<Real>::from_data({B}, target));
                auto weighted = mul(mul(diff, diff), Tensor<Real>::from_data({B}, mask));
                col_loss = scale(sum_all(weighted), Real(1) / std::max(cnt, Real(1)));
            } else {
                col_loss = mse_loss(pred, target);
            }
            num_sum = num_sum.defined() ? add(num_sum, col_loss) : col_loss;
            ++n_num;
        } else {
            std::vector<int32_t> target(original.cat[k].begin(), original.cat[k].end());
            if (m.obj.masked_only) {
                std::vector<Real> w(B);
                for (size_t b = 0; b < B; ++b) w[b] = static_cast<Real>(corrupted.mask[b * c + k]);
                col_loss = cross_entropy_logits_weighted(out, target, w);
            } else {
                col_loss = cross_entropy_logits(out, target);
            }
            cat_sum = cat_sum.defined() ? add(cat_sum, col_loss) : col_loss;
            ++n_cat;
        }
    }
    Tensor<Real> total;
    if (n_num) total = scale(num_sum, Real(1) / Real(n_num));
    if (n_cat) {
        auto cm = scale(cat_sum, Real(1) / Real(n_cat));
        total = total.defined() ? add(total, cm) : cm;
    }
    if (!total.defined()) throw UsageError("reconstruction_loss: table has no feature columns");
    return total;
}

// Symmetrized InfoNCE on cosine similarities: row i of the similarity matrix
// treats (z_i, z~_i) as the positive pair and the rest of the batch as
// negatives.
template <class Real>
Tensor<Real> infonce_loss(const Tensor<Real>& z, const Tensor<Real>& z_tilde, Real tau) {
    if (z.ndim() != 2 || z.shape() != z_tilde.shape()) throw ShapeError("infonce_loss: z and z~ must both be [B,z]");
    if (tau <= Real(0)) throw ConfigError("infonce_loss: temperature must be positive");
    const size_t B = z.dim(0);
    auto zn = row_normalize(z);
    auto zt = row_normalize(z_tilde);
    auto sim = scale(matmul(zn, permute(zt, {1, 0})), Real(1) / tau);
    std::vector<int32_t> diag(B);
    for (size_t i = 0; i < B; ++i) diag[i] = static_cast<int32_t>(i);
    auto fwd_loss = cross_entropy_logits(sim, diag);
    auto bwd_loss = cross_entropy_logits(permute(sim, {1, 0}), diag);
    return scale(add(fwd_loss, bwd_loss), Real(0.5));
}

template <class Real>
Tensor<Real> contrastive_loss(TabularModel<Real>& m, const RowBatch& original, const CorruptedBatch& corrupted,
                              const Forward& fwd) {
    auto z = mlp_head(m.params, names::ctr_head, cls_output(model_tokens(m, original, fwd)));
    auto zt = mlp_head(m.params, names::ctr_head, cls_output(model_tokens(m, corrupted.rows, fwd)));
    return infonce_loss(z, zt, static_cast<Real>(m.obj.tau));
}

// Task loss on the CLS representation: MSE for regression (standardized
// labels), logistic loss on one logit for binary, softmax cross-entropy for
// multiclass.
template <class Real>
Tensor<Real> supervised_loss(TabularModel<Real>& m, const RowBatch& batch, const Forward& fwd) {
    auto out = mlp_head(m.params, names::sup_head, cls_output(model_tokens(m, batch, fwd)));
    const size_t B = batch.size;
    switch (m.task) {
        case TaskType::regression: {
            std::vector<Real> target(B);
            for (size_t b = 0; b < B; ++b) target[b] = static_cast<Real>(batch.y_num[b]);
            return mse_loss(reshape(out, {B}), target);
        }
        case TaskType::binary: {
            std::vector<Real> target(B);
            for (size_t b = 0; b < B; ++b) target[b] = static_cast<Real>(batch.y_cat[b]);
            return bce_with_logits(reshape(out, {B}), target);
        }
        default: {
            if (out.dim(1) != static_cast<size_t>(m.n_classes))
                throw UsageError("supervised_loss: head width does not match class count");
            return cross_entropy_logits(out, batch.y_cat);
        }
    }
}

// One client step's loss for whatever objective the model carries.
template <class Real>
Tensor<Real> objective_loss(TabularModel<Real>& m, const PreparedTable& table, const RowBatch& batch,
                            Rng& corrupt_rng, const Forward& fwd) {
    switch (m.obj.kind) {
        case ObjectiveKind::reconstruction: {
            auto cb = corrupt_batch(batch, m.obj.corruption, table, corrupt_rng);
            return reconstruction_loss(m, batch, cb, fwd);
        }
        case ObjectiveKind::contrastive: {
            auto cb = corrupt_batch(batch, m.obj.corruption, table, corrupt_rng);
            return contrastive_loss(m, batch, cb, fwd);
        }
        default: return supervised_loss(m, batch, fwd);
    }
}

}  // namespace xtab
