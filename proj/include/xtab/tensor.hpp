#pragma once

// Reverse-mode autodiff core. The graph is taped per forward pass: each op
// returns a fresh node holding a backward closure plus owning pointers to its
// parents, and backward() frees the tape once gradients are written. Leaves
// (parameters) survive with their grads until the optimizer consumes them.
//
// Everything is templated on the scalar type: float is the training dtype,
// double is the verification dtype used by the finite-difference checks.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "xtab/common.hpp"

namespace xtab {

using Shape = std::vector<size_t>;

inline size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out + "]";
}

inline std::vector<size_t> row_major_strides(const Shape& s) {
    std::vector<size_t> st(s.size(), 1);
    for (size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
    return st;
}

// Right-aligned broadcast of b onto a (numpy rule: dims equal or 1).
inline Shape broadcast_shapes(const Shape& a, const Shape& b) {
    Shape out(std::max(a.size(), b.size()));
    for (size_t i = 0; i < out.size(); ++i) {
        size_t da = i < out.size() - a.size() ? 1 : a[i - (out.size() - a.size())];
        size_t db = i < out.size() - b.size() ? 1 : b[i - (out.size() - b.size())];
        if (da != db && da != 1 && db != 1)
            throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

// Strides of `in` padded to `out` rank, zeroed on broadcast dims. Walking the
// output linearly with these strides visits the matching input element.
inline std::vector<size_t> broadcast_strides(const Shape& in, const Shape& out) {
    std::vector<size_t> st(out.size(), 0);
    auto real = row_major_strides(in);
    size_t off = out.size() - in.size();
    for (size_t i = 0; i < in.size(); ++i)
        if (in[i] != 1) st[off + i] = real[i];
    return st;
}

// Per-thread autograd switch (like a no-grad guard): evaluation passes skip
// tape construction entirely.
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGradGuard() { grad_mode_flag() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <class Real>
struct TensorNode {
    Shape shape;
    std::vector<Real> value;
    std::vector<Real> grad;  // sized by backward(); empty means "no grad yet"
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void()> backward_fn;
};

template <class Real>
class Tensor {
  public:
    using Node = TensorNode<Real>;

    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->value.assign(shape_numel(n->shape), Real(0));
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor from_data(Shape shape, std::vector<Real> data, bool requires_grad = false) {
        if (shape_numel(shape) != data.size())
            throw ShapeError("data length " + std::to_string(data.size()) + " does not match " + shape_str(shape));
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor scalar(Real v) { return from_data({1}, {v}); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    size_t numel() const { return node_->value.size(); }
    size_t dim(size_t i) const { return node_->shape[i]; }
    size_t ndim() const { return node_->shape.size(); }
    std::vector<Real>& data() { return node_->value; }
    const std::vector<Real>& data() const { return node_->value; }
    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool v) { node_->requires_grad = v; }
    bool has_grad() const { return !node_->grad.empty(); }
    std::vector<Real>& grad() { return node_->grad; }
    const std::vector<Real>& grad() const { return node_->grad; }
    // Grad with absent-buffer-means-zero semantics.
    std::vector<Real> grad_or_zeros() const {
        return node_->grad.empty() ? std::vector<Real>(numel(), Real(0)) : node_->grad;
    }
    void clear_grad() { node_->grad.clear(); }
    std::shared_ptr<Node> node() const { return node_; }

    Real item() const {
        if (numel() != 1) throw UsageError("item() on non-scalar tensor " + shape_str(shape()));
        return node_->value[0];
    }

    bool all_finite() const {
        for (Real v : node_->value)
            if (!std::isfinite(v)) return false;
        return true;
    }

  private:
    std::shared_ptr<Node> node_;
};

namespace detail {

template <class Real>
std::shared_ptr<TensorNode<Real>> make_node(Shape shape) {
    auto n = std::make_shared<TensorNode<Real>>();
    n->value.assign(shape_numel(shape), Real(0));
    n->shape = std::move(shape);
    return n;
}

template <class Real>
bool recording(std::initializer_list<const Tensor<Real>*> inputs) {
    if (!grad_mode_flag()) return false;
    for (auto* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

template <class Real>
void attach(const std::shared_ptr<TensorNode<Real>>& out,
            std::vector<std::shared_ptr<TensorNode<Real>>> parents, std::function<void()> fn) {
    out->requires_grad = true;
    out->parents = std::move(parents);
    out->backward_fn = std::move(fn);
}

// Walks an output index space while tracking the broadcast-mapped index of
// one input. Only used off the matmul hot path.
struct BcastIter {
    std::vector<size_t> out_shape;
    std::vector<size_t> strides;
    size_t map(size_t flat) const {
        size_t idx = 0;
        for (size_t i = out_shape.size(); i-- > 0;) {
            size_t c = flat % out_shape[i];
            flat /= out_shape[i];
            idx += c * strides[i];
        }
        return idx;
    }
};

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary ops with broadcasting
// ---------------------------------------------------------------------------

namespace detail {

// b.shape equal to a suffix of a.shape (the bias-add pattern): the mapped
// b-index is just i mod b.numel, no per-element stride walk needed.
inline bool is_suffix_shape(const Shape& small, const Shape& big) {
    if (small.size() > big.size()) return false;
    for (size_t i = 0; i < small.size(); ++i)
        if (small[small.size() - 1 - i] != big[big.size() - 1 - i]) return false;
    return true;
}

}  // namespace detail

template <class Real, class Fwd, class Bwd>
Tensor<Real> broadcast_binary(const Tensor<Real>& a, const Tensor<Real>& b, Fwd fwd, Bwd bwd) {
    const Shape out_shape = broadcast_shapes(a.shape(), b.shape());
    auto out = detail::make_node<Real>(out_shape);
    const size_t n = out->value.size();
    const bool same = a.shape() == b.shape();
    const bool b_suffix = !same && detail::is_suffix_shape(b.shape(), a.shape());
    if (same) {
        const auto& av = a.data();
        const auto& bv = b.data();
        for (size_t i = 0; i < n; ++i) out->value[i] = fwd(av[i], bv[i]);
    } else if (b_suffix) {
        const auto& av = a.data();
        const auto& bv = b.data();
        const size_t bn = bv.size();
        for (size_t base = 0; base < n; base += bn)
            for (size_t j = 0; j < bn; ++j) out->value[base + j] = fwd(av[base + j], bv[j]);
    } else {
        detail::BcastIter ia{out_shape, broadcast_strides(a.shape(), out_shape)};
        detail::BcastIter ib{out_shape, broadcast_strides(b.shape(), out_shape)};
        const auto& av = a.data();
        const auto& bv = b.data();
        for (size_t i = 0; i < n; ++i) out->value[i] = fwd(av[ia.map(i)], bv[ib.map(i)]);
    }
    if (detail::recording<Real>({&a, &b})) {
        auto an = a.node();
        auto bn = b.node();
        auto on = out;
        Shape os = out_shape;
        detail::attach<Real>(out, {an, bn}, [an, bn, on, os, same, b_suffix, bwd] {
            const size_t m = on->grad.size();
            if (same) {
                for (size_t i = 0; i < m; ++i) {
                    auto [da, db] = bwd(an->value[i], bn->value[i], on->grad[i]);
                    if (an->requires_grad) an->grad[i] += da;
                    if (bn->requires_grad) bn->grad[i] += db;
                }
            } else if (b_suffix) {
                const size_t bsz = bn->value.size();
                for (size_t base = 0; base < m; base += bsz)
                    for (size_t j = 0; j < bsz; ++j) {
                        auto [da, db] = bwd(an->value[base + j], bn->value[j], on->grad[base + j]);
                        if (an->requires_grad) an->grad[base + j] += da;
                        if (bn->requires_grad) bn->grad[j] += db;
                    }
            } else {
                detail::BcastIter ia{os, broadcast_strides(an->shape, os)};
                detail::BcastIter ib{os, broadcast_strides(bn->shape, os)};
                for (size_t i = 0; i < m; ++i) {
                    size_t aj = ia.map(i), bj = ib.map(i);
                    auto [da, db] = bwd(an->value[aj], bn->value[bj], on->grad[i]);
                    if (an->requires_grad) an->grad[aj] += da;
                    if (bn->requires_grad) bn->grad[bj] += db;
                }
            }
        });
    }
    return Tensor<Real>(out);
}

template <class Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
    return broadcast_binary(
        a, b, [](Real x, Real y) { return x + y; },
        [](Real, Real, Real g) { return std::pair<Real, Real>(g, g); });
}

template <class Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
    return broadcast_binary(
        a, b, [](Real x, Real y) { return x - y; },
        [](Real, Real, Real g) { return std::pair<Real, Real>(g, -g); });
}

template <class Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
    return broadcast_binary(
        a, b, [](Real x, Real y) { return x * y; },
        [](Real x, Real y, Real g) { return std::pair<Real, Real>(g * y, g * x); });
}

template <class Real>
Tensor<Real> scale(const Tensor<Real>& a, Real c) {
    auto out = detail::make_node<Real>(a.shape());
    const auto& av = a.data();
    for (size_t i = 0; i < av.size(); ++i) out->value[i] = av[i] * c;
    if (detail::recording<Real>({&a})) {
        auto an = a.node();
        auto on = out;
        detail::attach<Real>(out, {an}, [an, on, c] {
            for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * c;
        });
    }
    return Tensor<Real>(out);
}

// ---------------------------------------------------------------------------
// matmul: [..,m,k] @ [..,k,n] -> [..,m,n], batch dims broadcast
// ---------------------------------------------------------------------------

namespace detail {

template <class Real>
void mm_acc(const Real* a, const Real* b, Real* c, size_t m, size_t k, size_t n) {
    // c[m,n] += a[m,k] @ b[k,n]
    for (size_t i = 0; i < m; ++i) {
        const Real* arow = a + i * k;
        Real* crow = c + i * n;
        for (size_t p = 0; p < k; ++p) {
            const Real av = arow[p];
            if (av == Real(0)) continue;
            const Real* brow = b + p * n;
            for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <class Real>
void mm_bt_acc(const Real* g, const Real* b, Real* da, size_t m, size_t k, size_t n) {
    // da[m,k] += g[m,n] @ b[k,n]^T
    for (size_t i = 0; i < m; ++i) {
        const Real* grow = g + i * n;
        Real* darow = da + i * k;
        for (size_t p = 0; p < k; ++p) {
            const Real* brow = b + p * n;
            Real acc = 0;
            for (size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            darow[p] += acc;
        }
    }
}

template <class Real>
void mm_at_acc(const Real* a, const Real* g, Real* db, size_t m, size_t k, size_t n) {
    // db[k,n] += a[m,k]^T @ g[m,n]
    for (size_t i = 0; i < m; ++i) {
        const Real* arow = a + i * k;
        const Real* grow = g + i * n;
        for (size_t p = 0; p < k; ++p) {
            const Real av = arow[p];
            if (av == Real(0)) continue;
            Real* dbrow = db + p * n;
            for (size_t j = 0; j < n; ++j) dbrow[j] += av * grow[j];
        }
    }
}

}  // namespace detail

template <class Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.ndim() < 2 || b.ndim() < 2) throw ShapeError("matmul needs rank >= 2 inputs");
    const size_t m = a.dim(a.ndim() - 2), k = a.dim(a.ndim() - 1);
    const size_t k2 = b.dim(b.ndim() - 2), n = b.dim(b.ndim() - 1);
    if (k != k2)
        throw ShapeError("matmul inner dims disagree: " + shape_str(a.shape()) + " @ " + shape_str(b.shape()));
    Shape ba(a.shape().begin(), a.shape().end() - 2);
    Shape bb(b.shape().begin(), b.shape().end() - 2);
    Shape batch = broadcast_shapes(ba, bb);
    Shape out_shape = batch;
    out_shape.push_back(m);
    out_shape.push_back(n);

    const size_t nbatch = shape_numel(batch);
    detail::BcastIter ia{batch, broadcast_strides(ba, batch)};
    detail::BcastIter ib{batch, broadcast_strides(bb, batch)};
    // batch strides address whole matrices
    const size_t amat = m * k, bmat = k * n, cmat = m * n;

    auto out = detail::make_node<Real>(out_shape);
    {
        const Real* ap = a.data().data();
        const Real* bp = b.data().data();
        Real* cp = out->value.data();
        for (size_t t = 0; t < nbatch; ++t)
            detail::mm_acc(ap + ia.map(t) * amat, bp + ib.map(t) * bmat, cp + t * cmat, m, k, n);
    }
    if (detail::recording<Real>({&a, &b})) {
        auto an = a.node();
        auto bn = b.node();
        auto on = out;
        detail::attach<Real>(out, {an, bn}, [an, bn, on, ia, ib, nbatch, amat, bmat, cmat, m, k, n] {
            const Real* gp = on->grad.data();
            for (size_t t = 0; t < nbatch; ++t) {
                const Real* g = gp + t * cmat;
                const Real* av = an->value.data() + ia.map(t) * amat;
                const Real* bv = bn->value.data() + ib.map(t) * bmat;
                if (an->requires_grad) detail::mm_bt_acc(g, bv, an->grad.data() + ia.map(t) * amat, m, k, n);
                if (bn->requires_grad) detail::mm_at_acc(av, g, bn->grad.data() + ib.map(t) * bmat, m, k, n);
            }
        });
    }
    return Tensor<Real>(out);
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> reshape(const Tensor<Real>& a, Shape new_shape) {
    if (shape_numel(new_shape) != a.numel())
        throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(new_shape));
    auto out = detail::make_node<Real>(new_shape);
    out->value = a.data();
    if (detail::recording<Real>({&a})) {
        auto an = a.node();
        auto on = out;
        detail::attach<Real>(out, {an}, [an, on] {
            for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
        });
    }
    return Tensor<Real>(out);
}

template <class Real>
Tensor<Real> permute(const Tensor<Real>& a, const std::vector<size_t>& perm) {
    if (perm.size() != a.ndim()) throw ShapeError("permute rank mismatch");
    Shape out_shape(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) out_shape[i] = a.dim(perm[i]);
    auto in_strides = row_major_strides(a.shape());
    std::vector<size_t> gather(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) gather[i] = in_strides[perm[i]];

    auto out = detail::make_node<Real>(out_shape);
    const size_t n = out->value.size();
    const auto& av = a.data();
    // incremental odometer: walk output linearly, keep the source index in
    // step (inner dimension updates are a single add)
    auto walk = [&out_shape, &gather, n](auto&& visit) {
        const size_t nd = out_shape.size();
        size_t coord[16] = {0};
        size_t src = 0;
        for (size_t i = 0; i < n; ++i) {
            visit(i, src);
            for (size_t d = nd; d-- > 0;) {
                src += gather[d];
                if (++coord[d] < out_shape[d]) break;
                src -= gather[d] * out_shape[d];
                coord[d] = 0;
            }
        }
    };
    if (a.ndim() > 16) throw ShapeError("permute: rank too large");
    walk([&](size_t i, size_t src) { out->value[i] = av[src]; });
    if (detail::recording<Real>({&a})) {
        auto an = a.node();
        auto on = out;
        detail::attach<Real>(out, {an}, [an, on, gather, out_shape, n] {
            const size_t nd = out_shape.size();
            size_t coord[16] = {0};
            size_t src = 0;
            for (size_t i = 0; i < n; ++i) {
                an->grad[src] += on->grad[i];
                for (size_t d = nd; d-- > 0;) {
                    src += gather[d];
                    if (++coord[d] < out_shape[d]) break;
                    src -= gather[d] * out_shape[d];
                    coord[d] = 0;
                }
            }
        });
    }
    return Tensor<Real>(out);
}

// Stack n tensors of shape [B,d] into [B,n,d].
template <class Real>
Tensor<Real> stack_tokens(const std::vector<Tensor<Real>>& tokens) {
    if (tokens.empty()) throw ShapeError("stack_tokens: empty list");
    const size_t B = tokens[0].dim(0), d = tokens[0].dim(1), n = tokens.size();
    for (const auto& t : tokens)
        if (t.ndim() != 2 || t.dim(0) != B || t.dim(1) != d) throw ShapeError("stack_tokens: ragged inputs");
    auto out = detail::make_node<Real>({B, n, d});
    for (size_t j = 0; j < n; ++j) {
        const auto& tv = tokens[j].data();
        for (size_t b = 0; b < B; ++b)
            std::copy(tv.begin() + b * d, tv.begin() + (b + 1) * d, out->value.begin() + (b * n + j) * d);
    }
    bool rec = false;
    if (grad_mode_flag())
        for (const auto& t : tokens) rec = rec || t.requires_grad();
    if (rec) {
        std::vector<std::shared_ptr<TensorNode<Real>>> parents;
        parents.reserve(n);
        for (const auto& t : tokens) parents.push_back(t.node());
        auto on = out;
        auto ps = parents;
        detail::attach<Real>(out, std::move(parents), [on, ps, B, n, d] {
            for (size_t j = 0; j < n; ++j) {
                if (!ps[j]->requires_grad) continue;
                for (size_t b = 0; b < B; ++b)
                    for (size_t x = 0; x < d; ++x) ps[j]->grad[b * d + x] += on->grad[(b * n + j) * d + x];
            }
        });
    }
    return Tensor<Real>(out);
}

// Select token j from [B,n,d] -> [B,d].
template <class Real>
Tensor<Real> token_at(const Tensor<Real>& t, size_t j) {
    if (t.ndim() != 3) throw ShapeError("token_at expects [B,n,d]");
    const size_t B = t.dim(0), n = t.dim(1), d = t.dim(2);
    if (j >= n) throw ShapeError("token index out of range");
    auto out = detail::make_node<Real>({B, d});
    const auto& tv = t.data();
    for (size_t b = 0; b < B; ++b)
        std::copy(tv.begin() + (b * n + j) * d, tv.begin() + (b * n + j + 1) * d, out->value.begin() + b * d);
    if (detail::recording<Real>({&t})) {
        auto tn = t.node();
        auto on = out;
        detail::attach<Real>(out, {tn}, [tn, on, B, n, d, j] {
            for (size_t b = 0; b < B; ++b)
                for (size_t x = 0; x < d; ++x) tn->grad[(b * n + j) * d + x] += on->grad[b * d + x];
        });
    }
    return Tensor<Real>(out);
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> sum_all(const Tensor<Real>& a) {
    auto out = detail::make_node<Real>({1});
    Real acc = 0;
    for (Real v : a.data()) acc += v;
    out->value[0] = acc;
    if (detail::recording<Real>({&a})) {
        auto an = a.node();
        auto on = out;
        detail::attach<Real>(out, {an}, [an, on] {
            const Real g = on->grad[0];
            for (auto& v : an->grad) v += g;
        });
    }
    return Tensor<Real>(out);
}

template <class Real>
Tensor<Real> mean_all(const Tensor<Real>& a) {
    return scale(sum_all(a), Real(1) / Real(a.numel()));
}

// Sum over one axis, keeping it as size 1.
template <class Real>
Tensor<Real> sum_axis(const Tensor<Real>& a, size_t axis) {
    if (axis >= a.ndim()) throw ShapeError("sum_axis: bad axis");
    Shape out_shape = a.shape();
    const size_t len = out_shape[axis];
    out_shape[axis] = 1;
    auto strides = row_major_strides(a.shape());
    const size_t step = strides[axis];
    auto out = detail::make_node<Real>(out_shape);
    const size_t outer = shape_numel(Shape(a.shape().begin(), a.shape().begin() + axis));
    const size_t inner = step;
    const size_t ablock = len * inner;
    const auto& av = a.data();
    for (size_t o = 0; o < outer; ++o)
        for (size_t i = 0; i < inner; ++i) {
            Real acc = 0;
            const Real* base = av.data() + o * ablock + i;
            for (size_t l = 0; l < len; ++l) acc += base[l * inner];
            out->value[o * inner + i] = acc;
        }
    if (detail::recording<Real>({&a})) {
        auto an = a.node();
        auto on = out;
        detail::attach<Real>(out, {an}, [an, on, outer, inner, len, ablock] {
            for (size_t o = 0; o < outer; ++o)
                for (size_t i = 0; i < inner; ++i) {
                    const Real g = on->grad[o * inner + i];
                    Real* base = an->grad.data() + o * ablock + i;
                    for (size_t l = 0; l < len; ++l) base[l * inner] += g;
                }
        });
    }
    return Tensor<Real>(out);
}

// ---------------------------------------------------------------------------
// nonlinearities and normalization
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> relu(const Tensor<Real>& a) {
    auto out = detail::make_node<Real>(a.shape());
    const auto& av = a.data();
    for (size_t i = 0; i < av.size(); ++i) out->value[i] = av[i] > Real(0) ? av[i] : Real(0);
    if (detail::recording<Real>({&a})) {
        auto an = a.node();
        auto on = out;
        detail::attach<Real>(out, {an}, [an, on] {
            for (size_t i = 0; i < on->grad.size(); ++i)
                if (an->value[i] > Real(0)) an->grad[i] += on->grad[i];
        });
    }
    return Tensor<Real>(out);
}

// ReGLU over the last axis: out = x[..,:h] * max(x[..,h:], 0).
template <class Real>
Tensor<Real> reglu(const Tensor<Real>& a) {
    const size_t last = a.dim(a.ndim() - 1);
    if (last % 2 != 0) throw ShapeError("reglu needs an even last dim, got " + std::to_string(last));
    const size_t h = last / 2;
    Shape out_shape = a.shape();
    out_shape.back() = h;
    auto out = detail::make_node<Real>(out_shape);
    const size_t rows = a.numel() / last;
    const auto& av = a.data();
    for (size_t r = 0; r < rows; ++r) {
        const Real* x = av.data() + r * last;
        Real* y = out->value.data() + r * h;
        for (size_t i = 0; i < h; ++i) y[i] = x[i] * (x[h + i] > Real(0) ? x[h + i] : Real(0));
    }
    if (detail::recording<Real>({&a})) {
        auto an = a.node();
        auto on = out;
        detail::attach<Real>(out, {an}, [an, on, rows, last, h] {
            for (size_t r = 0; r < rows; ++r) {
                const Real* x = an->value.data() + r * last;
                const Real* g = on->grad.data() + r * h;
                Real* dx = an->grad.data() + r * last;
                for (size_t i = 0; i < h; ++i) {
                    const Real gate = x[h + i] > Real(0) ? x[h + i] : Real(0);
                    dx[i] += g[i] * gate;
                    if (x[h + i] > Real(0)) dx[h + i] += g[i] * x[i];
                }
            }
        });
    }
    return Tensor<Real>(out);
}

template <class Real>
Tensor<Real> softmax(const Tensor<Real>& a, size_t axis) {
    if (axis >= a.ndim()) throw ShapeError("softmax: bad axis");
    auto strides = row_major_strides(a.shape());
    const size_t len = a.dim(axis), step = strides[axis];
    const size_t outer = shape_numel(Shape(a.shape().begin(), a.shape().begin() + axis));
    const size_t inner = step, block = len * inner;
    auto out = detail::make_node<Real>(a.shape());
    const auto& av = a.data();
    for (size_t o = 0; o < outer; ++o)
        for (size_t i = 0; i < inner; ++i) {
            const Real* x = av.data() + o * block + i;
            Real* y = out->value.data() + o * block + i;
            Real mx = x[0];
            for (size_t l = 1; l < len; ++l) mx = std::max(mx, x[l * inner]);
            Real z = 0;
            for (size_t l = 0; l < len; ++l) {
                const Real e = std::exp(x[l * inner] - mx);
                y[l * inner] = e;
                z += e;
            }
            // with a true max subtracted, z >= 1; anything else means NaN crept in
            if (!(z >= Real(1))) throw UsageError("softmax: NaN input");
            for (size_t l = 0; l < len; ++l) y[l * inner] /= z;
        }
    if (detail::recording<Real>({&a})) {
        auto an = a.node();
        auto on = out;
        detail::attach<Real>(out, {an}, [an, on, outer, inner, len, block] {
            for (size_t o = 0; o < outer; ++o)
                for (size_t i = 0; i < inner; ++i) {
                    const Real* y = on->value.data() + o * block + i;
                    const Real* g = on->grad.data() + o * block + i;
                    Real* dx = an->grad.data() + o * block + i;
                    Real dot = 0;
                    for (size_t l = 0; l < len; ++l) dot += y[l * inner] * g[l * inner];
                    for (size_t l = 0; l < len; ++l) dx[l * inner] += y[l * inner] * (g[l * inner] - dot);
                }
        });
    }
    return Tensor<Real>(out);
}

// Layer norm over the last axis with population variance and affine rescale.
template <class Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, const Tensor<Real>& gain, const Tensor<Real>& bias,
                        Real eps = Real(1e-5)) {
    const size_t d = x.dim(x.ndim() - 1);
    if (gain.numel() != d || bias.numel() != d) throw ShapeError("layer_norm: gain/bias must match last axis");
    const size_t rows = x.numel() / d;
    auto out = detail::make_node<Real>(x.shape());
    std::vector<Real> inv_std(rows), xhat(x.numel());
    const auto& xv = x.data();
    const auto& gv = gain.data();
    const auto& bv = bias.data();
    for (size_t r = 0; r < rows; ++r) {
        const Real* row = xv.data() + r * d;
        Real mean = 0;
        for (size_t i = 0; i < d; ++i) mean += row[i];
        mean /= Real(d);
        Real var = 0;
        for (size_t i = 0; i < d; ++i) var += (row[i] - mean) * (row[i] - mean);
        var /= Real(d);
        const Real inv = Real(1) / std::sqrt(var + eps);
        if (!std::isfinite(inv)) throw UsageError("layer_norm: non-finite row statistics");
        inv_std[r] = inv;
        for (size_t i = 0; i < d; ++i) {
            const Real h = (row[i] - mean) * inv;
            xhat[r * d + i] = h;
            out->value[r * d + i] = h * gv[i] + bv[i];
        }
    }
    if (detail::recording<Real>({&x, &gain, &bias})) {
        auto xn = x.node();
        auto gn = gain.node();
        auto bn = bias.node();
        auto on = out;
        detail::attach<Real>(out, {xn, gn, bn},
                             [xn, gn, bn, on, rows, d, inv_std = std::move(inv_std), xhat = std::move(xhat)] {
                                 for (size_t r = 0; r < rows; ++r) {
                                     const Real* g = on->grad.data() + r * d;
                                     const Real* h = xhat.data() + r * d;
                                     Real sum_gw = 0, sum_gwh = 0;
                                     for (size_t i = 0; i < d; ++i) {
                                         const Real gw = g[i] * gn->value[i];
                                         sum_gw += gw;
                                         sum_gwh += gw * h[i];
                                     }
                                     if (xn->requires_grad) {
                                         Real* dx = xn->grad.data() + r * d;
                                         const Real inv = inv_std[r];
                                         for (size_t i = 0; i < d; ++i) {
                                             const Real gw = g[i] * gn->value[i];
                                             dx[i] += inv * (gw - sum_gw / Real(d) - h[i] * sum_gwh / Real(d));
                                         }
                                     }
                                     if (gn->requires_grad)
                                         for (size_t i = 0; i < d; ++i) gn->grad[i] += g[i] * h[i];
                                     if (bn->requires_grad)
                                         for (size_t i = 0; i < d; ++i) bn->grad[i] += g[i];
                                 }
                             });
    }
    return Tensor<Real>(out);
}

template <class Real>
Tensor<Real> dropout(const Tensor<Real>& a, double p, bool training, Rng& rng) {
    if (p < 0.0 || p >= 1.0) throw ConfigError("dropout probability must be in [0,1), got " + std::to_string(p));
    if (!training || p == 0.0) {
        // identity in eval mode, but still a pass-through graph node
        return scale(a, Real(1));
    }
    auto out = detail::make_node<Real>(a.shape());
    const Real keep_inv = Real(1) / Real(1.0 - p);
    std::vector<uint8_t> mask(a.numel());
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    const auto& av = a.data();
    for (size_t i = 0; i < av.size(); ++i) {
        mask[i] = uni(rng) >= p;
        out->value[i] = mask[i] ? av[i] * keep_inv : Real(0);
    }
    if (detail::recording<Real>({&a})) {
        auto an = a.node();
        auto on = out;
        detail::attach<Real>(out, {an}, [an, on, keep_inv, mask = std::move(mask)] {
            for (size_t i = 0; i < on->grad.size(); ++i)
                if (mask[i]) an->grad[i] += on->grad[i] * keep_inv;
        });
    }
    return Tensor<Real>(out);
}

// Row-wise L2 normalization with an epsilon guard for zero-norm rows.
template <class Real>
Tensor<Real> row_normalize(const Tensor<Real>& a, Real eps = Real(1e-8)) {
    if (a.ndim() != 2) throw ShapeError("row_normalize expects [B,D]");
    const size_t B = a.dim(0), d = a.dim(1);
    auto out = detail::make_node<Real>(a.shape());
    std::vector<Real> norms(B);
    const auto& av = a.data();
    for (size_t b = 0; b < B; ++b) {
        Real s = 0;
        for (size_t i = 0; i < d; ++i) s += av[b * d + i] * av[b * d + i];
        const Real nrm = std::max(std::sqrt(s), eps);
        norms[b] = nrm;
        for (size_t i = 0; i < d; ++i) out->value[b * d + i] = av[b * d + i] / nrm;
    }
    if (detail::recording<Real>({&a})) {
        auto an = a.node();
        auto on = out;
        detail::attach<Real>(out, {an}, [an, on, B, d, norms = std::move(norms)] {
            for (size_t b = 0; b < B; ++b) {
                const Real* y = on->value.data() + b * d;
                const Real* g = on->grad.data() + b * d;
                Real* dx = an->grad.data() + b * d;
                Real dot = 0;
                for (size_t i = 0; i < d; ++i) dot += y[i] * g[i];
                const Real inv = Real(1) / norms[b];
                for (size_t i = 0; i < d; ++i) dx[i] += (g[i] - y[i] * dot) * inv;
            }
        });
    }
    return Tensor<Real>(out);
}

// ---------------------------------------------------------------------------
// lookup
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> embedding(const Tensor<Real>& table, const std::vector<int32_t>& indices) {
    if (table.ndim() != 2) throw ShapeError("embedding table must be [rows,d]");
    const size_t rows = table.dim(0), d = table.dim(1);
    auto out = detail::make_node<Real>({indices.size(), d});
    const auto& tv = table.data();
    for (size_t b = 0; b < indices.size(); ++b) {
        const int32_t idx = indices[b];
        if (idx < 0 || static_cast<size_t>(idx) >= rows)
            throw UsageError("embedding index " + std::to_string(idx) + " out of range [0," + std::to_string(rows) + ")");
        std::copy(tv.begin() + idx * d, tv.begin() + (idx + 1) * d, out->value.begin() + b * d);
    }
    if (detail::recording<Real>({&table})) {
        auto tn = table.node();
        auto on = out;
        detail::attach<Real>(out, {tn}, [tn, on, d, indices] {
            for (size_t b = 0; b < indices.size(); ++b) {
                const size_t idx = static_cast<size_t>(indices[b]);
                for (size_t i = 0; i < d; ++i) tn->grad[idx * d + i] += on->grad[b * d + i];
            }
        });
    }
    return Tensor<Real>(out);
}

// ---------------------------------------------------------------------------
// fused losses
// ---------------------------------------------------------------------------

// Mean squared error against constant targets.
template <class Real>
Tensor<Real> mse_loss(const Tensor<Real>& pred, const std::vector<Real>& target) {
    if (pred.numel() != target.size()) throw ShapeError("mse_loss: length mismatch");
    auto out = detail::make_node<Real>({1});
    const size_t n = pred.numel();
    const auto& pv = pred.data();
    Real acc = 0;
    for (size_t i = 0; i < n; ++i) acc += (pv[i] - target[i]) * (pv[i] - target[i]);
    out->value[0] = acc / Real(n);
    if (detail::recording<Real>({&pred})) {
        auto pn = pred.node();
        auto on = out;
        detail::attach<Real>(out, {pn}, [pn, on, target, n] {
            const Real g = on->grad[0] * Real(2) / Real(n);
            for (size_t i = 0; i < n; ++i) pn->grad[i] += g * (pn->value[i] - target[i]);
        });
    }
    return Tensor<Real>(out);
}

// Mean softmax cross-entropy from logits [B,C] against integer labels.
template <class Real>
Tensor<Real> cross_entropy_logits(const Tensor<Real>& logits, const std::vector<int32_t>& labels) {
    if (logits.ndim() != 2) throw ShapeError("cross_entropy_logits expects [B,C]");
    const size_t B = logits.dim(0), C = logits.dim(1);
    if (labels.size() != B) throw ShapeError("cross_entropy_logits: label count mismatch");
    auto out = detail::make_node<Real>({1});
    std::vector<Real> probs(B * C);
    const auto& lv = logits.data();
    Real acc = 0;
    for (size_t b = 0; b < B; ++b) {
        const int32_t y = labels[b];
        if (y < 0 || static_cast<size_t>(y) >= C) throw UsageError("cross_entropy_logits: label out of range");
        const Real* x = lv.data() + b * C;
        Real mx = x[0];
        for (size_t c = 1; c < C; ++c) mx = std::max(mx, x[c]);
        Real z = 0;
        for (size_t c = 0; c < C; ++c) z += std::exp(x[c] - mx);
        if (!(z >= Real(1))) throw UsageError("cross_entropy_logits: NaN logits");
        const Real logz = std::log(z) + mx;
        acc += logz - x[static_cast<size_t>(y)];
        for (size_t c = 0; c < C; ++c) probs[b * C + c] = std::exp(x[c] - logz);
    }
    out->value[0] = acc / Real(B);
    if (detail::recording<Real>({&logits})) {
        auto ln = logits.node();
        auto on = out;
        detail::attach<Real>(out, {ln}, [ln, on, labels, B, C, probs = std::move(probs)] {
            const Real g = on->grad[0] / Real(B);
            for (size_t b = 0; b < B; ++b)
                for (size_t c = 0; c < C; ++c) {
                    Real delta = probs[b * C + c];
                    if (static_cast<size_t>(labels[b]) == c) delta -= Real(1);
                    ln->grad[b * C + c] += g * delta;
                }
        });
    }
    return Tensor<Real>(out);
}

// Weighted softmax cross-entropy: sum_i w_i * CE_i / max(sum_i w_i, 1).
// Zero total weight yields a zero loss that still flows through the logits.
template <class Real>
Tensor<Real> cross_entropy_logits_weighted(const Tensor<Real>& logits, const std::vector<int32_t>& labels,
                                           const std::vector<Real>& weights) {
    if (logits.ndim() != 2) throw ShapeError("cross_entropy_logits_weighted expects [B,C]");
    const size_t B = logits.dim(0), C = logits.dim(1);
    if (labels.size() != B || weights.size() != B)
        throw ShapeError("cross_entropy_logits_weighted: label/weight count mismatch");
    auto out = detail::make_node<Real>({1});
    std::vector<Real> probs(B * C);
    const auto& lv = logits.data();
    Real acc = 0, wsum = 0;
    for (size_t b = 0; b < B; ++b) {
        const int32_t y = labels[b];
        if (y < 0 || static_cast<size_t>(y) >= C) throw UsageError("cross_entropy_logits_weighted: label out of range");
        const Real* x = lv.data() + b * C;
        Real mx = x[0];
        for (size_t c = 1; c < C; ++c) mx = std::max(mx, x[c]);
        Real z = 0;
        for (size_t c = 0; c < C; ++c) z += std::exp(x[c] - mx);
        if (!(z >= Real(1))) throw UsageError("cross_entropy_logits_weighted: NaN logits");
        const Real logz = std::log(z) + mx;
        acc += weights[b] * (logz - x[static_cast<size_t>(y)]);
        wsum += weights[b];
        for (size_t c = 0; c < C; ++c) probs[b * C + c] = std::exp(x[c] - logz);
    }
    const Real denom = std::max(wsum, Real(1));
    out->value[0] = acc / denom;
    if (detail::recording<Real>({&logits})) {
        auto ln = logits.node();
        auto on = out;
        detail::attach<Real>(out, {ln}, [ln, on, labels, weights, B, C, denom, probs = std::move(probs)] {
            const Real g = on->grad[0] / denom;
            for (size_t b = 0; b < B; ++b) {
                const Real w = weights[b];
                if (w == Real(0)) continue;
                for (size_t c = 0; c < C; ++c) {
                    Real delta = probs[b * C + c];
                    if (static_cast<size_t>(labels[b]) == c) delta -= Real(1);
                    ln->grad[b * C + c] += g * w * delta;
                }
            }
        });
    }
    return Tensor<Real>(out);
}

// Mean binary cross-entropy on a single logit per row, numerically stable.
template <class Real>
Tensor<Real> bce_with_logits(const Tensor<Real>& logits, const std::vector<Real>& targets) {
    if (logits.numel() != targets.size()) throw ShapeError("bce_with_logits: length mismatch");
    const size_t n = logits.numel();
    auto out = detail::make_node<Real>({1});
    const auto& lv = logits.data();
    Real acc = 0;
    for (size_t i = 0; i < n; ++i) {
        const Real x = lv[i];
        acc += std::max(x, Real(0)) - x * targets[i] + std::log1p(std::exp(-std::abs(x)));
    }
    out->value[0] = acc / Real(n);
    if (detail::recording<Real>({&logits})) {
        auto ln = logits.node();
        auto on = out;
        detail::attach<Real>(out, {ln}, [ln, on, targets, n] {
            const Real g = on->grad[0] / Real(n);
            for (size_t i = 0; i < n; ++i) {
                const Real s = Real(1) / (Real(1) + std::exp(-ln->value[i]));
                ln->grad[i] += g * (s - targets[i]);
            }
        });
    }
    return Tensor<Real>(out);
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

template <class Real>
void backward(const Tensor<Real>& root) {
    if (root.numel() != 1) throw UsageError("backward() requires a scalar root, got " + shape_str(root.shape()));
    using Node = TensorNode<Real>;
    std::vector<Node*> topo;
    std::unordered_set<Node*> seen;
    // iterative post-order DFS over parents
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }
    for (Node* n : topo) n->grad.assign(n->value.size(), Real(0));
    root.node()->grad[0] = Real(1);
    for (size_t i = topo.size(); i-- > 0;) {
        Node* n = topo[i];
        if (n->backward_fn) n->backward_fn();
    }
    // free the tape; leaves keep their grads
    for (Node* n : topo) {
        n->backward_fn = nullptr;
        n->parents.clear();
    }
}

// ---------------------------------------------------------------------------
// parameter sets
// ---------------------------------------------------------------------------

template <class Real>
struct ParamEntry {
    std::string name;
    Tensor<Real> tensor;
    bool is_shared = false;
    bool apply_weight_decay = false;
};

// Ordered, name-addressed parameter collection. Iteration order is insertion
// order, which fixes the summation order everywhere determinism matters.
template <class Real>
class ParamSet {
  public:
    Tensor<Real>& add(std::string name, Tensor<Real> t, bool is_shared, bool apply_weight_decay) {
        if (index_.count(name)) throw UsageError("duplicate parameter name: " + name);
        t.set_requires_grad(true);
        index_[name] = entries_.size();
        entries_.push_back(ParamEntry<Real>{std::move(name), std::move(t), is_shared, apply_weight_decay});
        return entries_.back().tensor;
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    Tensor<Real>& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw UsageError("unknown parameter: " + name);
        return entries_[it->second].tensor;
    }
    const Tensor<Real>& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw UsageError("unknown parameter: " + name);
        return entries_[it->second].tensor;
    }
    ParamEntry<Real>& entry(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw UsageError("unknown parameter: " + name);
        return entries_[it->second];
    }

    size_t size() const { return entries_.size(); }
    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

    std::vector<std::string> shared_names() const {
        std::vector<std::string> out;
        for (const auto& e : entries_)
            if (e.is_shared) out.push_back(e.name);
        return out;
    }

    size_t total_params() const {
        size_t n = 0;
        for (const auto& e : entries_) n += e.tensor.numel();
        return n;
    }

    void clear_grads() {
        for (auto& e : entries_) e.tensor.clear_grad();
    }

    // Deep copy of values (fresh nodes, no graph links).
    ParamSet clone_values() const {
        ParamSet out;
        for (const auto& e : entries_)
            out.add(e.name, Tensor<Real>::from_data(e.tensor.shape(), e.tensor.data()), e.is_shared,
                    e.apply_weight_decay);
        return out;
    }

  private:
    std::vector<ParamEntry<Real>> entries_;
    std::unordered_map<std::string, size_t> index_;
};

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

enum class OptimKind { sgd, adamw };

template <class Real>
struct OptimizerState {
    OptimKind kind = OptimKind::adamw;
    Real lr = Real(1e-4);
    Real beta1 = Real(0.9);
    Real beta2 = Real(0.999);
    Real eps = Real(1e-8);
    Real weight_decay = Real(1e-5);
    long step = 0;
    std::unordered_map<std::string, std::vector<Real>> m;  // first moment
    std::unordered_map<std::string, std::vector<Real>> v;  // second moment
};

// One optimizer step over the whole set. Decoupled weight decay hits only
// decay-flagged entries; gradients are cleared afterwards.
template <class Real>
void adamw_step(ParamSet<Real>& params, OptimizerState<Real>& state) {
    state.step += 1;
    for (auto& e : params) {
        auto& t = e.tensor;
        if (!t.has_grad())
            throw UsageError("adamw_step: missing gradient on parameter " + e.name);
        auto& w = t.data();
        const auto& g = t.grad();
        if (e.apply_weight_decay && state.weight_decay != Real(0)) {
            const Real f = Real(1) - state.lr * state.weight_decay;
            for (auto& x : w) x *= f;
        }
        if (state.kind == OptimKind::sgd) {
            for (size_t i = 0; i < w.size(); ++i) w[i] -= state.lr * g[i];
        } else {
            auto& m = state.m[e.name];
            auto& v = state.v[e.name];
            if (m.empty()) m.assign(w.size(), Real(0));
            if (v.empty()) v.assign(w.size(), Real(0));
            const Real bc1 = Real(1) - std::pow(state.beta1, Real(state.step));
            const Real bc2 = Real(1) - std::pow(state.beta2, Real(state.step));
            for (size_t i = 0; i < w.size(); ++i) {
                m[i] = state.beta1 * m[i] + (Real(1) - state.beta1) * g[i];
                v[i] = state.beta2 * v[i] + (Real(1) - state.beta2) * g[i] * g[i];
                const Real mhat = m[i] / bc1;
                const Real vhat = v[i] / bc2;
                w[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
            }
        }
        if (!t.all_finite()) throw UsageError("adamw_step: non-finite parameter after update: " + e.name);
        t.clear_grad();
    }
}

// ---------------------------------------------------------------------------
// init
// ---------------------------------------------------------------------------

// Kaiming-uniform weight init: uniform on [-sqrt(6/fan_in), +sqrt(6/fan_in)].
template <class Real>
Tensor<Real> kaiming_init(Shape shape, size_t fan_in, Rng& rng) {
    if (fan_in == 0) throw ConfigError("kaiming_init: fan_in must be positive");
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> uni(-bound, bound);
    auto t = Tensor<Real>::zeros(shape);
    for (auto& v : t.data()) v = static_cast<Real>(uni(rng));
    return t;
}

template <class Real>
Tensor<Real> zero_init(Shape shape) {
    return Tensor<Real>::zeros(std::move(shape));
}

}  // namespace xtab
