#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "helpers.hpp"
#include "xtab/fedpretrain.hpp"

namespace x = xtab;
namespace fs = std::filesystem;

namespace {

x::BackboneConfig small_bb(x::BackboneVariant v = x::BackboneVariant::ftt) {
    x::BackboneConfig cfg;
    cfg.variant = v;
    cfg.d = 8;
    cfg.n_heads = 2;
    cfg.n_blocks = 1;
    cfg.attn_dropout = 0;
    cfg.ff_dropout = 0;
    cfg.head_hidden = 8;
    return cfg;
}

x::FedConfig small_fed(int n_local = 1) {
    x::FedConfig fed;
    fed.n_local = n_local;
    fed.batch_size = 16;
    fed.lr = 1e-3;
    return fed;
}

x::TableDataset small_table(uint64_t seed, x::TaskType task = x::TaskType::regression) {
    x::SyntheticSpec spec;
    spec.n_tables = 1;
    spec.rows = 64;
    spec.cols = 4;
    spec.latent_dim = 2;
    spec.seed = seed;
    spec.cat_fraction = 0.25;
    auto ds = x::generate_synthetic_suite(spec)[0];
    ds.task_type = task;  // spec cycles tasks; force the one we want
    if (task != x::TaskType::regression && ds.schema.back().kind == x::ColumnKind::numerical) {
        // rebuild a categorical label from the numeric one
        auto& lcol = ds.columns.back();
        auto& lsch = ds.schema.back();
        lsch.kind = x::ColumnKind::categorical;
        const int classes = task == x::TaskType::binary ? 2 : 3;
        for (int q = 0; q < classes; ++q) {
            lsch.value_to_index["c" + std::to_string(q)] = q;
            lsch.categories.push_back("c" + std::to_string(q));
        }
        lcol.cat.resize(lcol.num.size());
        for (size_t r = 0; r < lcol.num.size(); ++r)
            lcol.cat[r] = static_cast<int32_t>(lcol.num[r] > 5.0 ? 1 : 0) % classes;
        lcol.num.clear();
    }
    return ds;
}

}  // namespace

TEST(ClientSteps, ZeroStepsGiveZeroDelta) {
    auto server = x::init_server<float>(small_bb(), small_fed(), 1);
    std::vector<x::ClientState<float>> clients;
    clients.push_back(x::make_client<float>(0, small_table(1), small_bb(), small_fed(), {x::ObjectiveKind::supervised}, 10));
    x::broadcast(server, clients);
    auto delta = x::client_local_steps(clients[0], server, 0);
    for (const auto& d : delta)
        for (double v : d) EXPECT_EQ(v, 0.0);
}

TEST(ClientSteps, FrozenLossGivesZeroDeltaWithoutDecay) {
    // constant labels standardize to zero; a zeroed supervised head then has
    // exactly zero loss and zero gradients everywhere
    auto ds = small_table(2);
    for (auto& v : ds.columns.back().num) v = 7.5;
    auto fed = small_fed();
    fed.weight_decay = 0.0;
    auto server = x::init_server<float>(small_bb(), fed, 1);
    std::vector<x::ClientState<float>> clients;
    clients.push_back(x::make_client<float>(0, ds, small_bb(), fed, {x::ObjectiveKind::supervised}, 11));
    for (const char* nm : {"head.sup.l2.weight", "head.sup.l2.bias"})
        for (auto& v : clients[0].model.params.at(nm).data()) v = 0.0f;
    x::broadcast(server, clients);
    auto delta = x::client_local_steps(clients[0], server, 3);
    for (const auto& d : delta)
        for (double v : d) EXPECT_EQ(v, 0.0);

    // with weight decay enabled the delta reduces to pure decay drift
    auto fed_wd = small_fed();
    fed_wd.weight_decay = 1e-2;
    auto server2 = x::init_server<float>(small_bb(), fed_wd, 1);
    std::vector<x::ClientState<float>> clients2;
    clients2.push_back(x::make_client<float>(0, ds, small_bb(), fed_wd, {x::ObjectiveKind::supervised}, 11));
    for (const char* nm : {"head.sup.l2.weight", "head.sup.l2.bias"})
        for (auto& v : clients2[0].model.params.at(nm).data()) v = 0.0f;
    x::broadcast(server2, clients2);
    auto delta2 = x::client_local_steps(clients2[0], server2, 1);
    size_t ti = 0;
    const float decay_factor = 1.0f - static_cast<float>(fed_wd.lr) * static_cast<float>(fed_wd.weight_decay);
    for (const auto& e : server2.shared) {
        const bool decayed = e.apply_weight_decay;
        for (size_t j = 0; j < delta2[ti].size(); ++j) {
            const float w0 = e.tensor.data()[j];
            if (decayed)
                EXPECT_EQ(delta2[ti][j], static_cast<double>(w0 * decay_factor) - static_cast<double>(w0));
            else
                EXPECT_EQ(delta2[ti][j], 0.0);
        }
        ++ti;
    }
}

TEST(Aggregate, CancellationPlainAndTriple) {
    auto server = x::init_server<float>(small_bb(), small_fed(), 3);
    size_t wq_idx = 0;
    {
        size_t i = 0;
        for (const auto& e : server.shared) {
            if (e.name == "block0.attn.wq.weight") wq_idx = i;
            ++i;
        }
    }
    auto w0 = server.shared.at("block0.attn.wq.weight").data();

    {
        std::vector<x::DeltaList> deltas(2);
        for (auto& dl : deltas)
            for (const auto& e : server.shared) dl.emplace_back(e.tensor.numel(), 0.0);
        // +u and -u cancel
        deltas[0][wq_idx].assign(deltas[0][wq_idx].size(), 0.125);
        deltas[1][wq_idx].assign(deltas[1][wq_idx].size(), -0.125);
        x::server_aggregate(server, deltas);
        EXPECT_EQ(server.shared.at("block0.attn.wq.weight").data(), w0);
    }

    // K=1 plain adoption
    {
        std::vector<x::DeltaList> deltas(1);
        for (const auto& e : server.shared) deltas[0].emplace_back(e.tensor.numel(), 0.0);
        deltas[0][wq_idx].assign(deltas[0][wq_idx].size(), 0.5);
        x::server_aggregate(server, deltas);
        for (size_t i = 0; i < w0.size(); ++i)
            EXPECT_FLOAT_EQ(server.shared.at("block0.attn.wq.weight").data()[i], w0[i] + 0.5f);
    }

    // K=3 identical deltas triple (sum, not mean)
    {
        auto before = server.shared.at("block0.attn.wq.weight").data();
        std::vector<x::DeltaList> deltas(3);
        for (auto& dl : deltas)
            for (const auto& e : server.shared) dl.emplace_back(e.tensor.numel(), 0.0);
        for (auto& dl : deltas) dl[wq_idx].assign(dl[wq_idx].size(), 0.25);
        x::server_aggregate(server, deltas);
        for (size_t i = 0; i < before.size(); ++i)
            EXPECT_FLOAT_EQ(server.shared.at("block0.attn.wq.weight").data()[i], before[i] + 0.75f);
    }
}

TEST(Aggregate, MissingDeltaIsProtocolError) {
    auto server = x::init_server<float>(small_bb(), small_fed(), 3);
    std::vector<x::DeltaList> deltas(1);  // too few tensors inside
    deltas[0].emplace_back(3, 0.0);
    EXPECT_THROW(x::server_aggregate(server, deltas), x::ProtocolError);
    EXPECT_THROW(x::server_aggregate(server, {}), x::ProtocolError);
}

TEST(Aggregate, OptionalMeanMode) {
    auto fed = small_fed();
    fed.mean_aggregation = true;
    auto server = x::init_server<float>(small_bb(), fed, 3);
    size_t wq_idx = 0;
    {
        size_t i = 0;
        for (const auto& e : server.shared) {
            if (e.name == "block0.attn.wq.weight") wq_idx = i;
            ++i;
        }
    }
    auto before = server.shared.at("block0.attn.wq.weight").data();
    std::vector<x::DeltaList> deltas(4);
    for (auto& dl : deltas)
        for (const auto& e : server.shared) dl.emplace_back(e.tensor.numel(), 0.0);
    for (auto& dl : deltas) dl[wq_idx].assign(dl[wq_idx].size(), 1.0);
    x::server_aggregate(server, deltas);
    for (size_t i = 0; i < before.size(); ++i)
        EXPECT_FLOAT_EQ(server.shared.at("block0.attn.wq.weight").data()[i], before[i] + 1.0f);
}

TEST(Broadcast, SynchronizesSharedLeavesPrivateAlone) {
    auto fed = small_fed();
    auto server = x::init_server<float>(small_bb(), fed, 5);
    std::vector<x::ClientState<float>> clients;
    clients.push_back(x::make_client<float>(0, small_table(3), small_bb(), fed, {x::ObjectiveKind::supervised}, 20));
    clients.push_back(x::make_client<float>(1, small_table(4), small_bb(), fed, {x::ObjectiveKind::supervised}, 21));

    auto feat0_before = clients[0].model.params.at(x::names::feat_w(1)).data();
    x::broadcast(server, clients);
    for (auto& c : clients)
        for (const auto& e : server.shared) {
            const auto& cv = c.model.params.at(e.name).data();
            for (size_t i = 0; i < cv.size(); ++i) EXPECT_EQ(cv[i], e.tensor.data()[i]);
        }
    // featurizers untouched and pairwise different
    EXPECT_EQ(clients[0].model.params.at(x::names::feat_w(1)).data(), feat0_before);
    EXPECT_NE(clients[0].model.params.at(x::names::cls).data(), clients[1].model.params.at(x::names::cls).data());
}

TEST(Broadcast, BlocksPlusClsSynchronizesClsToo) {
    auto fed = small_fed();
    fed.share_mode = x::ShareMode::blocks_plus_cls;
    auto server = x::init_server<float>(small_bb(), fed, 5);
    EXPECT_TRUE(server.shared.has(x::names::cls));
    std::vector<x::ClientState<float>> clients;
    clients.push_back(x::make_client<float>(0, small_table(3), small_bb(), fed, {x::ObjectiveKind::supervised}, 20));
    clients.push_back(x::make_client<float>(1, small_table(4), small_bb(), fed, {x::ObjectiveKind::supervised}, 21));
    x::broadcast(server, clients);
    EXPECT_EQ(clients[0].model.params.at(x::names::cls).data(), clients[1].model.params.at(x::names::cls).data());
}

TEST(ShareMode, FirstBlockOnly) {
    auto cfg = small_bb();
    cfg.n_blocks = 2;
    x::ParamSet<float> ps;
    x::Rng rng(1);
    x::build_backbone(ps, cfg, rng);
    x::apply_share_mode(ps, x::ShareMode::first_block_only);
    for (auto& e : ps) {
        const bool expect = e.name.rfind("block0.", 0) == 0;
        EXPECT_EQ(e.is_shared, expect) << e.name;
    }
}

TEST(Pretrain, IdenticalClientsProduceIdenticalDeltas) {
    auto fed = small_fed(2);
    auto server = x::init_server<float>(small_bb(), fed, 7);
    auto ds = small_table(6);
    std::vector<x::ClientState<float>> clients;
    clients.push_back(x::make_client<float>(0, ds, small_bb(), fed, {x::ObjectiveKind::reconstruction}, 33));
    clients.push_back(x::make_client<float>(1, ds, small_bb(), fed, {x::ObjectiveKind::reconstruction}, 33));
    for (int round = 0; round < 3; ++round) {
        x::broadcast(server, clients);
        auto d0 = x::client_local_steps(clients[0], server, fed.n_local);
        auto d1 = x::client_local_steps(clients[1], server, fed.n_local);
        EXPECT_EQ(d0, d1);
        x::server_aggregate(server, {d0, d1});
    }
}

TEST(Pretrain, ZeroRoundsKeepsInitialization) {
    auto fed = small_fed();
    auto server = x::init_server<float>(small_bb(), fed, 9);
    auto init = server.shared.clone_values();
    std::vector<x::ClientState<float>> clients;
    clients.push_back(x::make_client<float>(0, small_table(7), small_bb(), fed, {x::ObjectiveKind::supervised}, 40));
    auto log = x::pretrain_run(clients, server, 0);
    EXPECT_EQ(log.aggregation_events, 0u);
    for (const auto& e : init) EXPECT_EQ(server.shared.at(e.name).data(), e.tensor.data());
}

TEST(Pretrain, FederatedEqualsReferenceLoopBitExact) {
    // K=1, N=1: the federated trajectory must match a plain training loop
    // bit-for-bit, in both SGD and AdamW modes
    for (auto optim : {x::OptimKind::sgd, x::OptimKind::adamw}) {
        const uint64_t master = 17, client_seed = 55;
        auto bb = small_bb();
        auto fed = small_fed(1);
        fed.optim = optim;
        auto ds = small_table(8);
        const int rounds = 10;

        auto server = x::init_server<float>(bb, fed, master);
        std::vector<x::ClientState<float>> clients;
        clients.push_back(x::make_client<float>(0, ds, bb, fed, {x::ObjectiveKind::reconstruction}, client_seed));
        x::pretrain_run(clients, server, rounds);

        // reference: single-machine loop over the same table/seeds, no
        // server, no deltas, no broadcast
        auto local = ds;
        local.split = x::split_dataset(local.n_rows(), 0);
        auto prep = x::apply_preprocess(local, x::fit_preprocess(local));
        auto model = x::build_model<float>(prep, bb, {x::ObjectiveKind::reconstruction}, client_seed);
        x::apply_share_mode(model.params, fed.share_mode);
        {
            // same initial shared weights the server started from
            x::ParamSet<float> tmpl;
            x::Rng bb_rng = x::rng_stream(master, x::stream_tag::backbone_init);
            x::build_backbone(tmpl, bb, bb_rng);
            for (auto& e : tmpl) model.params.at(e.name).data() = e.tensor.data();
        }
        x::OptimizerState<float> opt;
        opt.kind = optim;
        opt.lr = static_cast<float>(fed.lr);
        opt.weight_decay = static_cast<float>(fed.weight_decay);
        x::BatchIterator it(prep.split.train, static_cast<size_t>(fed.batch_size), true, client_seed);
        x::Rng crng = x::rng_stream(client_seed, x::stream_tag::corruption);
        x::Rng drng = x::rng_stream(client_seed, x::stream_tag::dropout);
        for (int s = 0; s < rounds; ++s) {
            auto batch = x::make_batch(prep, it.next_recycling());
            auto loss = x::objective_loss(model, prep, batch, crng, x::Forward{true, &drng});
            x::backward(loss);
            x::adamw_step(model.params, opt);
        }
        for (const auto& e : server.shared)
            EXPECT_EQ(e.tensor.data(), model.params.at(e.name).data()) << e.name << " optim=" << int(optim);
        for (const auto& e : model.params)
            EXPECT_EQ(e.tensor.data(), clients[0].model.params.at(e.name).data()) << e.name;
    }
}

TEST(Pretrain, ThreadCountDoesNotChangeResults) {
    auto bb = small_bb();
    for (int threads : {1, 3}) {
        auto fed = small_fed(2);
        fed.threads = threads;
        auto server = x::init_server<float>(bb, fed, 77);
        std::vector<x::ClientState<float>> clients;
        for (int k = 0; k < 3; ++k)
            clients.push_back(x::make_client<float>(k, small_table(20 + static_cast<uint64_t>(k)), bb, fed,
                                                    {x::ObjectiveKind::reconstruction}, 100 + static_cast<uint64_t>(k)));
        x::pretrain_run(clients, server, 3);
        static std::vector<float> reference;
        if (threads == 1) {
            reference = server.shared.at("block0.ff.l1.weight").data();
        } else {
            EXPECT_EQ(server.shared.at("block0.ff.l1.weight").data(), reference);
        }
    }
}

TEST(Pretrain, NoAliasingBetweenClientFeaturizers) {
    auto fed = small_fed();
    auto bb = small_bb();
    auto server = x::init_server<float>(bb, fed, 5);
    auto ds = small_table(30);
    std::vector<x::ClientState<float>> clients;
    clients.push_back(x::make_client<float>(0, ds, bb, fed, {x::ObjectiveKind::supervised}, 1));
    clients.push_back(x::make_client<float>(1, ds, bb, fed, {x::ObjectiveKind::supervised}, 2));
    x::broadcast(server, clients);
    auto other_before = clients[1].model.params.at(x::names::feat_w(1)).data();
    for (auto& v : clients[0].model.params.at(x::names::feat_w(1)).data()) v += 5.0f;
    EXPECT_EQ(clients[1].model.params.at(x::names::feat_w(1)).data(), other_before);
}

TEST(Pretrain, DoublingNHalvesAggregationEvents) {
    auto bb = small_bb();
    const int total_steps = 8;
    std::vector<size_t> events;
    for (int n : {1, 2, 4}) {
        auto fed = small_fed(n);
        auto server = x::init_server<float>(bb, fed, 8);
        std::vector<x::ClientState<float>> clients;
        clients.push_back(x::make_client<float>(0, small_table(31), bb, fed, {x::ObjectiveKind::supervised}, 3));
        auto log = x::pretrain_run(clients, server, total_steps / n);
        events.push_back(log.aggregation_events);
    }
    EXPECT_EQ(events[0], 2 * events[1]);
    EXPECT_EQ(events[1], 2 * events[2]);
}

TEST(Pretrain, ClientFailureAbortsRound) {
    // a client producing non-finite values must abort the synchronous round,
    // serial or threaded
    for (int threads : {1, 2}) {
        auto fed = small_fed();
        fed.threads = threads;
        auto server = x::init_server<float>(small_bb(), fed, 11);
        std::vector<x::ClientState<float>> clients;
        clients.push_back(x::make_client<float>(0, small_table(40), small_bb(), fed, {x::ObjectiveKind::supervised}, 1));
        clients.push_back(x::make_client<float>(1, small_table(41), small_bb(), fed, {x::ObjectiveKind::supervised}, 2));
        // poison the non-shared tensors (broadcast would repair shared ones)
        for (auto& e : clients[1].model.params)
            if (!e.is_shared)
                for (auto& v : e.tensor.data()) v = std::numeric_limits<float>::quiet_NaN();
        EXPECT_THROW(x::pretrain_run(clients, server, 1), x::UsageError);
    }
}

TEST(Checkpoint, RoundTripBitIdentical) {
    auto fed = small_fed();
    auto server = x::init_server<float>(small_bb(), fed, 13);
    const auto p1 = (fs::temp_directory_path() / "xtab_ckpt_a.xtb").string();
    const auto p2 = (fs::temp_directory_path() / "xtab_ckpt_b.xtb").string();
    x::checkpoint_save(p1, small_bb(), server.shared);
    auto cp = x::checkpoint_load(p1);
    EXPECT_EQ(cp.tensors.size(), server.shared.size());

    // save -> load -> save must produce byte-identical files
    x::ParamSet<float> loaded;
    for (const auto& t : cp.tensors) {
        std::vector<float> vals(t.data.begin(), t.data.end());
        loaded.add(t.name, x::Tensor<float>::from_data(t.shape, std::move(vals)), true, false);
    }
    x::checkpoint_save(p2, small_bb(), loaded);
    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    EXPECT_EQ(b1, b2);
}

TEST(Checkpoint, TruncationAndCorruptionDetected) {
    auto fed = small_fed();
    auto server = x::init_server<float>(small_bb(), fed, 13);
    const auto p = (fs::temp_directory_path() / "xtab_ckpt_c.xtb").string();
    x::checkpoint_save(p, small_bb(), server.shared);
    std::ifstream in(p, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();

    const auto trunc = (fs::temp_directory_path() / "xtab_ckpt_trunc.xtb").string();
    std::ofstream(trunc, std::ios::binary) << bytes.substr(0, bytes.size() / 2);
    EXPECT_THROW(x::checkpoint_load(trunc), x::LoadError);

    bytes[20] ^= 0x5A;
    const auto corrupt = (fs::temp_directory_path() / "xtab_ckpt_corrupt.xtb").string();
    std::ofstream(corrupt, std::ios::binary) << bytes;
    EXPECT_THROW(x::checkpoint_load(corrupt), x::LoadError);
}

TEST(Checkpoint, VariantMismatchRejectedWithDiff) {
    auto fed = small_fed();
    auto server = x::init_server<float>(small_bb(x::BackboneVariant::ftt), fed, 13);
    const auto p = (fs::temp_directory_path() / "xtab_ckpt_d.xtb").string();
    x::checkpoint_save(p, small_bb(x::BackboneVariant::ftt), server.shared);
    auto cp = x::checkpoint_load(p);
    x::ParamSet<float> target;
    try {
        x::checkpoint_check_config(cp, small_bb(x::BackboneVariant::saintv));
        FAIL() << "expected ConfigError";
    } catch (const x::ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("ftt"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("saintv"), std::string::npos);
    }
}
