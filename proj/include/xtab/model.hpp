#pragma once

// Data-specific featurizers plus the three shared backbone variants. One
// backbone parameter set serves every table width: featurizers translate a
// row into per-column tokens, the backbone only ever sees [B, n, d].

#include <cmath>
#include <string>
#include <vector>

#include "xtab/data.hpp"
#include "xtab/tensor.hpp"

namespace xtab {

enum class BackboneVariant : uint8_t { ftt = 0, fastformer = 1, saintv = 2 };

inline const char* variant_name(BackboneVariant v) {
    switch (v) {
        case BackboneVariant::ftt: return "ftt";
        case BackboneVariant::fastformer: return "fastformer";
        default: return "saintv";
    }
}

inline BackboneVariant variant_from_name(const std::string& s) {
    if (s == "ftt") return BackboneVariant::ftt;
    if (s == "fastformer") return BackboneVariant::fastformer;
    if (s == "saintv") return BackboneVariant::saintv;
    throw ConfigError("unknown backbone variant: " + s);
}

struct BackboneConfig {
    BackboneVariant variant = BackboneVariant::ftt;
    int n_blocks = 3;
    int d = 192;
    int n_heads = 8;
    int ff_hidden = 0;  // 0 means "same as d"
    double attn_dropout = 0.2;
    double ff_dropout = 0.1;
    int head_hidden = 192;  // projection head hidden width

    int ffh() const { return ff_hidden > 0 ? ff_hidden : d; }
    void validate() const {
        if (d <= 0 || n_blocks < 0 || n_heads <= 0) throw ConfigError("backbone config: non-positive sizes");
        if (d % n_heads != 0) throw ConfigError("backbone config: d must be divisible by n_heads");
    }
};

// Per-forward context: training toggles dropout, which draws from rng.
struct Forward {
    bool training = false;
    Rng* rng = nullptr;
};

namespace names {
inline std::string feat_w(size_t k) { return "feat.col" + std::to_string(k) + ".weight"; }
inline std::string feat_b(size_t k) { return "feat.col" + std::to_string(k) + ".bias"; }
inline std::string feat_emb(size_t k) { return "feat.col" + std::to_string(k) + ".emb"; }
inline constexpr const char* cls = "cls";
inline std::string block(int i) { return "block" + std::to_string(i) + "."; }
}  // namespace names

// ---------------------------------------------------------------------------
// shared building blocks
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> linear(const Tensor<Real>& x, const Tensor<Real>& w, const Tensor<Real>& b) {
    return add(matmul(x, w), b);
}

template <class Real>
void add_linear(ParamSet<Real>& ps, const std::string& name, int in, int out, Rng& rng, bool shared, bool decay) {
    ps.add(name + ".weight", kaiming_init<Real>({static_cast<size_t>(in), static_cast<size_t>(out)},
                                                static_cast<size_t>(in), rng),
           shared, decay);
    ps.add(name + ".bias", zero_init<Real>({static_cast<size_t>(out)}), shared, false);
}

template <class Real>
void add_layer_norm(ParamSet<Real>& ps, const std::string& name, int d, bool shared) {
    auto gain = Tensor<Real>::zeros({static_cast<size_t>(d)});
    for (auto& v : gain.data()) v = Real(1);
    ps.add(name + ".gain", std::move(gain), shared, false);
    ps.add(name + ".bias", zero_init<Real>({static_cast<size_t>(d)}), shared, false);
}

template <class Real>
Tensor<Real> apply_ln(ParamSet<Real>& ps, const std::string& name, const Tensor<Real>& x) {
    return layer_norm(x, ps.at(name + ".gain"), ps.at(name + ".bias"));
}

template <class Real>
Tensor<Real> apply_linear(ParamSet<Real>& ps, const std::string& name, const Tensor<Real>& x) {
    return linear(x, ps.at(name + ".weight"), ps.at(name + ".bias"));
}

// ---------------------------------------------------------------------------
// featurizer
// ---------------------------------------------------------------------------

// Featurizer parameters are per-table (non-shared): a d-vector scale + bias
// per numerical column, an embedding table per categorical column, and the
// CLS embedding. Init draws from the featurizer stream only, so two runs
// differing in backbone init still build identical featurizers.
template <class Real>
void build_featurizer(ParamSet<Real>& ps, const std::vector<ColumnKind>& kinds, const std::vector<int32_t>& n_cat,
                      const BackboneConfig& cfg, Rng& rng) {
    const size_t d = static_cast<size_t>(cfg.d);
    for (size_t k = 0; k < kinds.size(); ++k) {
        if (kinds[k] == ColumnKind::numerical) {
            ps.add(names::feat_w(k), kaiming_init<Real>({d}, d, rng), false, false);
            ps.add(names::feat_b(k), zero_init<Real>({d}), false, false);
        } else {
            ps.add(names::feat_emb(k),
                   kaiming_init<Real>({static_cast<size_t>(n_cat[k]), d}, d, rng), false, false);
        }
    }
    ps.add(names::cls, kaiming_init<Real>({d}, d, rng), false, false);
}

// Tokens for one batch: column k -> x_k * W_k + b_k (numerical) or embedding
// lookup (categorical); the CLS token is appended last.
template <class Real>
Tensor<Real> featurize(ParamSet<Real>& ps, const std::vector<ColumnKind>& kinds, const RowBatch& batch,
                       const BackboneConfig& cfg) {
    if (kinds.size() != batch.num.size()) throw ShapeError("featurize: batch does not match featurizer schema");
    const size_t B = batch.size;
    std::vector<Tensor<Real>> tokens;
    tokens.reserve(kinds.size() + 1);
    for (size_t k = 0; k < kinds.size(); ++k) {
        if (kinds[k] == ColumnKind::numerical) {
            std::vector<Real> vals(B);
            for (size_t b = 0; b < B; ++b) vals[b] = static_cast<Real>(batch.num[k][b]);
            auto x = Tensor<Real>::from_data({B, 1}, std::move(vals));
            tokens.push_back(add(mul(x, reshape(ps.at(names::feat_w(k)), {1, static_cast<size_t>(cfg.d)})),
                                 ps.at(names::feat_b(k))));
        } else {
            tokens.push_back(embedding(ps.at(names::feat_emb(k)), batch.cat[k]));
        }
    }
    auto zeros = Tensor<Real>::zeros({B, 1});
    tokens.push_back(add(zeros, ps.at(names::cls)));  // broadcast CLS to every row
    return stack_tokens(tokens);
}

// ---------------------------------------------------------------------------
// attention blocks
// ---------------------------------------------------------------------------

namespace detail {

template <class Real>
Tensor<Real> split_heads(const Tensor<Real>& x, int n_heads) {
    const size_t B = x.dim(0), n = x.dim(1), d = x.dim(2);
    const size_t H = static_cast<size_t>(n_heads), dh = d / H;
    return permute(reshape(x, {B, n, H, dh}), {0, 2, 1, 3});  // [B,H,n,dh]
}

template <class Real>
Tensor<Real> merge_heads(const Tensor<Real>& x) {
    const size_t B = x.dim(0), H = x.dim(1), n = x.dim(2), dh = x.dim(3);
    return reshape(permute(x, {0, 2, 1, 3}), {B, n, H * dh});
}

template <class Real>
Tensor<Real> maybe_dropout(const Tensor<Real>& x, double p, const Forward& fwd) {
    if (!fwd.training || p <= 0.0) return x;
    if (!fwd.rng) throw UsageError("training forward pass needs an rng for dropout");
    return dropout(x, p, true, *fwd.rng);
}

}  // namespace detail

// Scaled dot-product multi-head self-attention over the token axis of a
// normalized input; returns the projected attention output (pre-residual).
template <class Real>
Tensor<Real> mhsa(ParamSet<Real>& ps, const std::string& p, const BackboneConfig& cfg, const Tensor<Real>& x) {
    const size_t dh = static_cast<size_t>(cfg.d / cfg.n_heads);
    auto q = detail::split_heads(apply_linear(ps, p + "attn.wq", x), cfg.n_heads);
    auto k = detail::split_heads(apply_linear(ps, p + "attn.wk", x), cfg.n_heads);
    auto v = detail::split_heads(apply_linear(ps, p + "attn.wv", x), cfg.n_heads);
    auto scores = scale(matmul(q, permute(k, {0, 1, 3, 2})), Real(1) / static_cast<Real>(std::sqrt(double(dh))));
    auto probs = softmax(scores, 3);
    auto ctx = detail::merge_heads(matmul(probs, v));
    return apply_linear(ps, p + "attn.wo", ctx);
}

template <class Real>
Tensor<Real> feed_forward(ParamSet<Real>& ps, const std::string& p, const Tensor<Real>& x) {
    return apply_linear(ps, p + "ff.l2", reglu(apply_linear(ps, p + "ff.l1", x)));
}

template <class Real>
void add_attention_params(ParamSet<Real>& ps, const std::string& p, const BackboneConfig& cfg, Rng& rng) {
    add_linear(ps, p + "attn.wq", cfg.d, cfg.d, rng, true, true);
    add_linear(ps, p + "attn.wk", cfg.d, cfg.d, rng, true, true);
    add_linear(ps, p + "attn.wv", cfg.d, cfg.d, rng, true, true);
    add_linear(ps, p + "attn.wo", cfg.d, cfg.d, rng, true, true);
}

template <class Real>
void add_ff_params(ParamSet<Real>& ps, const std::string& p, const BackboneConfig& cfg, Rng& rng) {
    add_layer_norm(ps, p + "ln2", cfg.d, true);
    add_linear(ps, p + "ff.l1", cfg.d, 2 * cfg.ffh(), rng, true, true);  // 2x for the ReGLU gate
    add_linear(ps, p + "ff.l2", cfg.ffh(), cfg.d, rng, true, true);
}

// Pre-norm residual transformer block: t += Drop(MHSA(LN(t))); t += Drop(FF(LN(t))).
template <class Real>
Tensor<Real> mhsa_block(ParamSet<Real>& ps, const std::string& p, const BackboneConfig& cfg, Tensor<Real> t,
                        const Forward& fwd) {
    t = add(t, detail::maybe_dropout(mhsa(ps, p, cfg, apply_ln(ps, p + "ln1", t)), cfg.attn_dropout, fwd));
    t = add(t, detail::maybe_dropout(feed_forward(ps, p, apply_ln(ps, p + "ln2", t)), cfg.ff_dropout, fwd));
    return t;
}

// Additive attention: tokens interact with global query/key summaries only,
// giving linear complexity in the token count.
template <class Real>
Tensor<Real> fastformer_attention(ParamSet<Real>& ps, const std::string& p, const BackboneConfig& cfg,
                                  const Tensor<Real>& x) {
    const size_t H = static_cast<size_t>(cfg.n_heads);
    const size_t dh = static_cast<size_t>(cfg.d / cfg.n_heads);
    const Real inv_sqrt = Real(1) / static_cast<Real>(std::sqrt(double(dh)));

    auto q = detail::split_heads(apply_linear(ps, p + "attn.wq", x), cfg.n_heads);  // [B,H,n,dh]
    auto k = detail::split_heads(apply_linear(ps, p + "attn.wk", x), cfg.n_heads);
    auto v = detail::split_heads(apply_linear(ps, p + "attn.wv", x), cfg.n_heads);

    auto qvec = reshape(ps.at(p + "attn.qvec"), {1, H, 1, dh});
    auto alpha = softmax(scale(sum_axis(mul(q, qvec), 3), inv_sqrt), 2);  // [B,H,n,1]
    auto q_global = sum_axis(mul(alpha, q), 2);                          // [B,H,1,dh]

    auto pmix = mul(q_global, k);  // p_i = q (.) k_i
    auto kvec = reshape(ps.at(p + "attn.kvec"), {1, H, 1, dh});
    auto beta = softmax(scale(sum_axis(mul(pmix, kvec), 3), inv_sqrt), 2);
    auto k_global = sum_axis(mul(beta, pmix), 2);  // [B,H,1,dh]

    auto u = detail::merge_heads(mul(k_global, v));  // [B,n,d]
    return add(apply_linear(ps, p + "attn.wo", u), detail::merge_heads(q));
}

template <class Real>
Tensor<Real> fastformer_block(ParamSet<Real>& ps, const std::string& p, const BackboneConfig& cfg, Tensor<Real> t,
                              const Forward& fwd) {
    t = add(t, detail::maybe_dropout(fastformer_attention(ps, p, cfg, apply_ln(ps, p + "ln1", t)), cfg.attn_dropout,
                                     fwd));
    t = add(t, detail::maybe_dropout(feed_forward(ps, p, apply_ln(ps, p + "ln2", t)), cfg.ff_dropout, fwd));
    return t;
}

// Saint-v block: a column-attention sub-block, then a row-attention sub-block
// that transposes batch and token axes so attention runs across samples. The
// parameter count stays independent of both n and B.
template <class Real>
Tensor<Real> saintv_block(ParamSet<Real>& ps, const std::string& p, const BackboneConfig& cfg, Tensor<Real> t,
                          const Forward& fwd) {
    t = mhsa_block(ps, p + "col.", cfg, t, fwd);
    auto tr = permute(t, {1, 0, 2});  // [n,B,d]
    tr = mhsa_block(ps, p + "row.", cfg, tr, fwd);
    return permute(tr, {1, 0, 2});
}

// ---------------------------------------------------------------------------
// backbone assembly
// ---------------------------------------------------------------------------

template <class Real>
void build_backbone(ParamSet<Real>& ps, const BackboneConfig& cfg, Rng& rng) {
    cfg.validate();
    for (int i = 0; i < cfg.n_blocks; ++i) {
        const std::string p = names::block(i);
        switch (cfg.variant) {
            case BackboneVariant::ftt: {
                add_layer_norm(ps, p + "ln1", cfg.d, true);
                add_attention_params(ps, p, cfg, rng);
                add_ff_params(ps, p, cfg, rng);
                break;
            }
            case BackboneVariant::fastformer: {
                add_layer_norm(ps, p + "ln1", cfg.d, true);
                add_attention_params(ps, p, cfg, rng);
                const size_t H = static_cast<size_t>(cfg.n_heads), dh = static_cast<size_t>(cfg.d / cfg.n_heads);
                ps.add(p + "attn.qvec", kaiming_init<Real>({H, dh}, dh, rng), true, true);
                ps.add(p + "attn.kvec", kaiming_init<Real>({H, dh}, dh, rng), true, true);
                add_ff_params(ps, p, cfg, rng);
                break;
            }
            case BackboneVariant::saintv: {
                for (const char* sub : {"col.", "row."}) {
                    add_layer_norm(ps, p + sub + "ln1", cfg.d, true);
                    add_attention_params(ps, p + sub, cfg, rng);
                    add_ff_params(ps, p + sub, cfg, rng);
                }
                break;
            }
        }
    }
}

template <class Real>
Tensor<Real> backbone_forward(ParamSet<Real>& ps, const BackboneConfig& cfg, Tensor<Real> tokens,
                              const Forward& fwd) {
    for (int i = 0; i < cfg.n_blocks; ++i) {
        const std::string p = names::block(i);
        switch (cfg.variant) {
            case BackboneVariant::ftt: tokens = mhsa_block(ps, p, cfg, tokens, fwd); break;
            case BackboneVariant::fastformer: tokens = fastformer_block(ps, p, cfg, tokens, fwd); break;
            case BackboneVariant::saintv: tokens = saintv_block(ps, p, cfg, tokens, fwd); break;
        }
    }
    return tokens;
}

// CLS sits at the last token position.
template <class Real>
Tensor<Real> cls_output(const Tensor<Real>& tokens) {
    return token_at(tokens, tokens.dim(1) - 1);
}

}  // namespace xtab
