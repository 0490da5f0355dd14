#pragma once

// Simulated-federated cross-table pretraining. One process hosts all clients;
// a round is broadcast -> N local AdamW/SGD steps per client -> delta-sum
// aggregation on the server. Deltas travel as pure messages (name-ordered
// double buffers), so the aggregation is expressible over a wire later.
//
// Delta arithmetic is done in double regardless of the training dtype: the
// f32 round trip w + (w' - w) is then exact, which keeps a K=1, N=1 federated
// run bit-identical to a plain single-machine loop.

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include "xtab/data.hpp"
#include "xtab/model.hpp"
#include "xtab/objectives.hpp"
#include "xtab/tensor.hpp"

namespace xtab {

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

enum class ShareMode { blocks_only, blocks_plus_cls, first_block_only };

inline const char* share_mode_name(ShareMode m) {
    switch (m) {
        case ShareMode::blocks_only: return "blocks_only";
        case ShareMode::blocks_plus_cls: return "blocks_plus_cls";
        default: return "first_block_only";
    }
}

inline ShareMode share_mode_from_name(const std::string& s) {
    if (s == "blocks_only") return ShareMode::blocks_only;
    if (s == "blocks_plus_cls") return ShareMode::blocks_plus_cls;
    if (s == "first_block_only") return ShareMode::first_block_only;
    throw ConfigError("unknown share mode: " + s);
}

// Which parameters count as shared under the chosen mode.
inline bool is_shared_name(const std::string& name, ShareMode mode) {
    switch (mode) {
        case ShareMode::blocks_only: return name.rfind("block", 0) == 0;
        case ShareMode::blocks_plus_cls: return name.rfind("block", 0) == 0 || name == names::cls;
        default: return name.rfind("block0.", 0) == 0;
    }
}

template <class Real>
void apply_share_mode(ParamSet<Real>& ps, ShareMode mode) {
    for (auto& e : ps) e.is_shared = is_shared_name(e.name, mode);
}

struct FedConfig {
    int n_local = 5;  // N local updates per aggregation
    ShareMode share_mode = ShareMode::blocks_only;
    OptimKind optim = OptimKind::adamw;
    double lr = 1e-4;
    double weight_decay = 1e-5;
    int batch_size = 128;
    bool mean_aggregation = false;  // off by default: raw delta sum, no 1/K
    int threads = 1;
};

// ---------------------------------------------------------------------------
// client / server state
// ---------------------------------------------------------------------------

template <class Real>
struct ClientState {
    int index = 0;
    PreparedTable table;
    TabularModel<Real> model;
    OptimizerState<Real> opt;
    std::unique_ptr<BatchIterator> iter;
    Rng corrupt_rng{0}, dropout_rng{0};
};

// Deltas parallel the server's shared-entry order.
using DeltaList = std::vector<std::vector<double>>;

template <class Real>
struct ServerState {
    ParamSet<Real> shared;  // canonical shared weights; every entry flagged shared
    long round = 0;
    FedConfig cfg;
    BackboneConfig backbone;
};

// The server's canonical shared weights. Built from the master seed's
// backbone/featurizer streams so every client starts from the same shared
// after the first broadcast.
template <class Real>
ServerState<Real> init_server(const BackboneConfig& bb, const FedConfig& fed, uint64_t master_seed) {
    ServerState<Real> s;
    s.cfg = fed;
    s.backbone = bb;
    ParamSet<Real> tmpl;
    Rng bb_rng = rng_stream(master_seed, stream_tag::backbone_init);
    build_backbone(tmpl, bb, bb_rng);
    if (fed.share_mode == ShareMode::blocks_plus_cls) {
        Rng cls_rng = rng_stream(master_seed, stream_tag::featurizer_init);
        tmpl.add(names::cls, kaiming_init<Real>({static_cast<size_t>(bb.d)}, static_cast<size_t>(bb.d), cls_rng),
                 true, false);
    }
    apply_share_mode(tmpl, fed.share_mode);
    for (auto& e : tmpl)
        if (e.is_shared)
            s.shared.add(e.name, Tensor<Real>::from_data(e.tensor.shape(), e.tensor.data()), true,
                         e.apply_weight_decay);
    return s;
}

template <class Real>
ClientState<Real> make_client(int index, const TableDataset& ds, const BackboneConfig& bb, const FedConfig& fed,
                              const ObjectiveConfig& obj, uint64_t client_seed, uint64_t split_seed = 0) {
    ClientState<Real> c;
    c.index = index;
    TableDataset local = ds;
    if (local.split.train.empty()) local.split = split_dataset(local.n_rows(), split_seed);
    c.table = apply_preprocess(local, fit_preprocess(local));
    c.model = build_model<Real>(c.table, bb, obj, client_seed);
    apply_share_mode(c.model.params, fed.share_mode);
    c.opt.kind = fed.optim;
    c.opt.lr = static_cast<Real>(fed.lr);
    c.opt.weight_decay = static_cast<Real>(fed.weight_decay);
    c.iter = std::make_unique<BatchIterator>(c.table.split.train, static_cast<size_t>(fed.batch_size), true,
                                             client_seed);
    c.corrupt_rng = rng_stream(client_seed, stream_tag::corruption);
    c.dropout_rng = rng_stream(client_seed, stream_tag::dropout);
    return c;
}

// ---------------------------------------------------------------------------
// protocol operations
// ---------------------------------------------------------------------------

template <class Real>
void broadcast(const ServerState<Real>& server, std::vector<ClientState<Real>>& clients) {
    for (auto& c : clients)
        for (const auto& e : server.shared) {
            auto& t = c.model.params.at(e.name);
            if (t.shape() != e.tensor.shape())
                throw ProtocolError("broadcast: shape mismatch on " + e.name);
            t.data() = e.tensor.data();
        }
}

struct LocalStepStats {
    double mean_loss = 0;
    int steps = 0;
};

// Runs n_steps local optimizer steps and returns the shared-weight delta
// (weights after stepping minus weights at entry, shared tensors only).
template <class Real>
DeltaList client_local_steps(ClientState<Real>& c, const ServerState<Real>& server, int n_steps,
                             LocalStepStats* stats = nullptr) {
    std::vector<std::vector<double>> start;
    start.reserve(server.shared.size());
    for (const auto& e : server.shared) {
        const auto& v = c.model.params.at(e.name).data();
        start.emplace_back(v.begin(), v.end());
    }
    double loss_sum = 0;
    for (int s = 0; s < n_steps; ++s) {
        auto rows = c.iter->next_recycling();
        auto batch = make_batch(c.table, rows);
        auto loss = objective_loss(c.model, c.table, batch, c.corrupt_rng, Forward{true, &c.dropout_rng});
        loss_sum += static_cast<double>(loss.item());
        backward(loss);
        adamw_step(c.model.params, c.opt);
    }
    if (stats) {
        stats->steps = n_steps;
        stats->mean_loss = n_steps ? loss_sum / n_steps : 0.0;
    }
    DeltaList delta;
    delta.reserve(start.size());
    size_t i = 0;
    for (const auto& e : server.shared) {
        const auto& now = c.model.params.at(e.name).data();
        std::vector<double> d(now.size());
        for (size_t j = 0; j < now.size(); ++j) d[j] = static_cast<double>(now[j]) - start[i][j];
        delta.push_back(std::move(d));
        ++i;
    }
    return delta;
}

// Delta-sum aggregation: w <- w + sum_k delta_k over shared tensors, in
// client-index order, accumulated in double, rounded once into the parameter
// dtype.
template <class Real>
void server_aggregate(ServerState<Real>& server, const std::vector<DeltaList>& deltas) {
    const size_t K = deltas.size();
    if (K == 0) throw ProtocolError("server_aggregate: no client deltas");
    size_t ti = 0;
    for (auto& e : server.shared) {
        auto& w = e.tensor.data();
        for (const auto& d : deltas) {
            if (d.size() != server.shared.size() || d[ti].size() != w.size())
                throw ProtocolError("server_aggregate: missing or misshapen client delta for " + e.name);
        }
        for (size_t j = 0; j < w.size(); ++j) {
            double acc = 0;
            for (size_t k = 0; k < K; ++k) acc += deltas[k][ti][j];
            if (server.cfg.mean_aggregation) acc /= static_cast<double>(K);
            w[j] = static_cast<Real>(static_cast<double>(w[j]) + acc);
        }
        ++ti;
    }
    server.round += server.cfg.n_local;
}

struct PretrainLog {
    std::vector<double> round_mean_loss;  // one entry per round
    size_t aggregation_events = 0;
};

// Synchronous rounds: broadcast -> local steps on every client -> aggregate.
// Clients may run on worker threads; results are identical regardless of the
// thread count because summation order is fixed by client index. A client
// failure aborts the round (the first exception, by client index, rethrows).
template <class Real>
PretrainLog pretrain_run(std::vector<ClientState<Real>>& clients, ServerState<Real>& server, int rounds,
                         const std::vector<int>& checkpoint_schedule = {},
                         const std::function<void(int)>& on_checkpoint = {}) {
    if (clients.empty()) throw UsageError("pretrain_run: need at least one client");
    PretrainLog log;
    const int threads = std::max(1, server.cfg.threads);
    for (int r = 1; r <= rounds; ++r) {
        broadcast(server, clients);
        std::vector<DeltaList> deltas(clients.size());
        std::vector<LocalStepStats> stats(clients.size());
        if (threads == 1 || clients.size() == 1) {
            for (size_t k = 0; k < clients.size(); ++k)
                deltas[k] = client_local_steps(clients[k], server, server.cfg.n_local, &stats[k]);
        } else {
            std::vector<std::exception_ptr> errors(clients.size());
            std::vector<std::thread> pool;
            const size_t nthreads = std::min<size_t>(static_cast<size_t>(threads), clients.size());
            for (size_t t = 0; t < nthreads; ++t) {
                pool.emplace_back([&, t] {
                    for (size_t k = t; k < clients.size(); k += nthreads) {
                        try {
                            deltas[k] = client_local_steps(clients[k], server, server.cfg.n_local, &stats[k]);
                        } catch (...) {
                            errors[k] = std::current_exception();
                        }
                    }
                });
            }
            for (auto& th : pool) th.join();
            for (auto& err : errors)
                if (err) std::rethrow_exception(err);
        }
        server_aggregate(server, deltas);
        ++log.aggregation_events;
        double loss = 0;
        for (const auto& s : stats) loss += s.mean_loss;
        log.round_mean_loss.push_back(loss / static_cast<double>(clients.size()));
        if (on_checkpoint)
            for (int cp : checkpoint_schedule)
                if (cp == r) on_checkpoint(r);
    }
    return log;
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------
//
// Binary layout (little-endian):
//   magic "XTB1"
//   header { version u32, variant u8, n_blocks u16, d u16, n_heads u16,
//            tensor_count u32 }
//   per tensor { name_len u16, name utf-8, ndim u8, dims u64..., f32 payload }
//   crc32 u32 over all preceding bytes

constexpr uint32_t kCheckpointVersion = 1;

struct CheckpointTensor {
    std::string name;
    Shape shape;
    std::vector<float> data;
};

struct CheckpointData {
    uint32_t version = kCheckpointVersion;
    BackboneVariant variant = BackboneVariant::ftt;
    uint16_t n_blocks = 0, d = 0, n_heads = 0;
    std::vector<CheckpointTensor> tensors;
};

namespace detail {

template <class T>
void put(std::string& buf, T v) {
    char tmp[sizeof(T)];
    std::memcpy(tmp, &v, sizeof(T));
    buf.append(tmp, sizeof(T));
}

template <class T>
T take(const std::string& buf, size_t& off) {
    if (off + sizeof(T) > buf.size()) throw LoadError("checkpoint: truncated file");
    T v;
    std::memcpy(&v, buf.data() + off, sizeof(T));
    off += sizeof(T);
    return v;
}

}  // namespace detail

template <class Real>
void checkpoint_save(const std::string& path, const BackboneConfig& bb, const ParamSet<Real>& shared) {
    std::string buf;
    buf.append("XTB1", 4);
    detail::put<uint32_t>(buf, kCheckpointVersion);
    detail::put<uint8_t>(buf, static_cast<uint8_t>(bb.variant));
    detail::put<uint16_t>(buf, static_cast<uint16_t>(bb.n_blocks));
    detail::put<uint16_t>(buf, static_cast<uint16_t>(bb.d));
    detail::put<uint16_t>(buf, static_cast<uint16_t>(bb.n_heads));
    uint32_t count = 0;
    for (const auto& e : shared)
        if (e.is_shared) ++count;
    detail::put<uint32_t>(buf, count);
    for (const auto& e : shared) {
        if (!e.is_shared) continue;
        detail::put<uint16_t>(buf, static_cast<uint16_t>(e.name.size()));
        buf.append(e.name);
        detail::put<uint8_t>(buf, static_cast<uint8_t>(e.tensor.ndim()));
        for (size_t d : e.tensor.shape()) detail::put<uint64_t>(buf, static_cast<uint64_t>(d));
        for (Real v : e.tensor.data()) detail::put<float>(buf, static_cast<float>(v));
    }
    const uint32_t crc = static_cast<uint32_t>(
        crc32(0, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(buf.size())));
    detail::put<uint32_t>(buf, crc);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw LoadError("checkpoint: cannot write " + path);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

inline CheckpointData checkpoint_load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("checkpoint: cannot open " + path);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < 4 + 11 + 4) throw LoadError("checkpoint: truncated file");
    if (buf.compare(0, 4, "XTB1") != 0) throw LoadError("checkpoint: bad magic");
    const size_t body = buf.size() - 4;
    uint32_t stored_crc;
    std::memcpy(&stored_crc, buf.data() + body, 4);
    const uint32_t crc = static_cast<uint32_t>(
        crc32(0, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(body)));
    if (crc != stored_crc) throw LoadError("checkpoint: CRC mismatch (corrupt or truncated file)");

    size_t off = 4;
    CheckpointData cp;
    cp.version = detail::take<uint32_t>(buf, off);
    if (cp.version != kCheckpointVersion)
        throw LoadError("checkpoint: unsupported version " + std::to_string(cp.version));
    cp.variant = static_cast<BackboneVariant>(detail::take<uint8_t>(buf, off));
    cp.n_blocks = detail::take<uint16_t>(buf, off);
    cp.d = detail::take<uint16_t>(buf, off);
    cp.n_heads = detail::take<uint16_t>(buf, off);
    const uint32_t count = detail::take<uint32_t>(buf, off);
    cp.tensors.resize(count);
    for (auto& t : cp.tensors) {
        const uint16_t name_len = detail::take<uint16_t>(buf, off);
        if (off + name_len > body) throw LoadError("checkpoint: truncated file");
        t.name.assign(buf.data() + off, name_len);
        off += name_len;
        const uint8_t ndim = detail::take<uint8_t>(buf, off);
        t.shape.resize(ndim);
        size_t numel = 1;
        for (auto& d : t.shape) {
            d = static_cast<size_t>(detail::take<uint64_t>(buf, off));
            numel *= d;
        }
        t.data.resize(numel);
        if (off + numel * 4 > body) throw LoadError("checkpoint: truncated file");
        std::memcpy(t.data.data(), buf.data() + off, numel * 4);
        off += numel * 4;
    }
    if (off != body) throw LoadError("checkpoint: trailing bytes before CRC");
    return cp;
}

inline void checkpoint_check_config(const CheckpointData& cp, const BackboneConfig& bb) {
    std::string diff;
    if (cp.variant != bb.variant)
        diff += " variant " + std::string(variant_name(cp.variant)) + " vs " + variant_name(bb.variant);
    if (cp.n_blocks != bb.n_blocks)
        diff += " n_blocks " + std::to_string(cp.n_blocks) + " vs " + std::to_string(bb.n_blocks);
    if (cp.d != bb.d) diff += " d " + std::to_string(cp.d) + " vs " + std::to_string(bb.d);
    if (cp.n_heads != bb.n_heads)
        diff += " n_heads " + std::to_string(cp.n_heads) + " vs " + std::to_string(bb.n_heads);
    if (!diff.empty()) throw ConfigError("checkpoint/config mismatch:" + diff);
}

// Loads checkpoint tensors into matching parameters. Tensors absent from the
// checkpoint (partial share modes) keep their current values.
template <class Real>
void checkpoint_apply(const CheckpointData& cp, const BackboneConfig& bb, ParamSet<Real>& target) {
    checkpoint_check_config(cp, bb);
    for (const auto& t : cp.tensors) {
        if (!target.has(t.name)) throw ConfigError("checkpoint tensor " + t.name + " has no matching parameter");
        auto& dst = target.at(t.name);
        if (dst.shape() != t.shape) throw ConfigError("checkpoint tensor " + t.name + " shape mismatch");
        auto& v = dst.data();
        for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<Real>(t.data[i]);
    }
}

}  // namespace xtab
