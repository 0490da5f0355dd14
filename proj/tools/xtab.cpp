// Command-line front end: synthetic-suite generation, federated pretraining,
// downstream finetuning with paired baselines, report aggregation, and
// checkpoint inspection. XTAB_VERIFY=1 switches the numeric core to f64.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <thread>

#include "xtab/data.hpp"
#include "xtab/fedpretrain.hpp"
#include "xtab/finetune.hpp"
#include "xtab/metrics.hpp"
#include "xtab/model.hpp"
#include "xtab/objectives.hpp"
#include "xtab/results.hpp"
#include "xtab/tensor.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

bool verify_mode() {
    const char* v = std::getenv("XTAB_VERIFY");
    return v && std::string(v) == "1";
}

struct CommonModelArgs {
    std::string backbone = "ftt";
    int d = 192;
    int blocks = 3;
    int heads = 8;
    double attn_dropout = 0.2;
    double ff_dropout = 0.1;
    int head_hidden = 192;

    xtab::BackboneConfig config() const {
        xtab::BackboneConfig bb;
        bb.variant = xtab::variant_from_name(backbone);
        bb.d = d;
        bb.n_blocks = blocks;
        bb.n_heads = heads;
        bb.attn_dropout = attn_dropout;
        bb.ff_dropout = ff_dropout;
        bb.head_hidden = head_hidden;
        bb.validate();
        return bb;
    }

    void add_flags(CLI::App* app) {
        app->add_option("--backbone", backbone, "backbone variant: ftt|fastformer|saintv");
        app->add_option("--d", d, "embedding size");
        app->add_option("--blocks", blocks, "transformer blocks");
        app->add_option("--heads", heads, "attention heads");
        app->add_option("--attn-dropout", attn_dropout, "attention dropout");
        app->add_option("--ff-dropout", ff_dropout, "feed-forward dropout");
        app->add_option("--head-hidden", head_hidden, "projection head hidden width");
    }
};

json backbone_to_json(const CommonModelArgs& m) {
    return json{{"backbone", m.backbone}, {"d", m.d},
                {"blocks", m.blocks},     {"heads", m.heads},
                {"attn_dropout", m.attn_dropout}, {"ff_dropout", m.ff_dropout},
                {"head_hidden", m.head_hidden}};
}

std::string config_hash(const json& cfg) { return xtab::hex64(xtab::fnv1a64(cfg.dump())); }

xtab::SchemaOverride load_sidecar(const std::string& csv_path) {
    xtab::SchemaOverride ov;
    const fs::path sidecar = csv_path + ".schema.json";
    if (!fs::exists(sidecar)) return ov;
    std::ifstream in(sidecar);
    json j;
    in >> j;
    if (j.contains("label")) ov.label = j["label"].get<std::string>();
    if (j.contains("columns"))
        for (auto& [name, kind] : j["columns"].items())
            ov.kinds[name] = kind.get<std::string>() == "categorical" ? xtab::ColumnKind::categorical
                                                                      : xtab::ColumnKind::numerical;
    return ov;
}

void write_sidecar(const xtab::TableDataset& ds, const std::string& csv_path) {
    json cols = json::object();
    std::string label;
    for (const auto& s : ds.schema) {
        cols[s.name] = s.kind == xtab::ColumnKind::categorical ? "categorical" : "numerical";
        if (s.role == xtab::ColumnRole::label) label = s.name;
    }
    json j{{"label", label}, {"columns", cols}};
    std::ofstream out(csv_path + ".schema.json");
    out << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

struct SynthArgs {
    int tables = 12;
    int rows = 600;
    int cols = 8;
    int latent = 4;
    double cat_fraction = 0.25;
    double noise = 0.3;
    uint64_t seed = 0;
    std::string out = "data";
};

int run_synth(const SynthArgs& a) {
    xtab::SyntheticSpec spec;
    spec.n_tables = a.tables;
    spec.rows = a.rows;
    spec.cols = a.cols;
    spec.latent_dim = a.latent;
    spec.cat_fraction = a.cat_fraction;
    spec.noise = a.noise;
    spec.seed = a.seed;
    fs::create_directories(a.out);
    auto suite = xtab::generate_synthetic_suite(spec);
    for (const auto& ds : suite) {
        const std::string path = (fs::path(a.out) / (ds.name + ".csv")).string();
        xtab::write_csv(ds, path);
        write_sidecar(ds, path);
        std::cout << path << "  rows=" << ds.n_rows() << " cols=" << ds.schema.size() - 1
                  << " task=" << xtab::task_name(ds.task_type) << "\n";
    }
    return 0;
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

struct PretrainArgs {
    CommonModelArgs model;
    uint64_t seed = 0;
    int rounds = 2000;
    int n_local = 5;
    std::string share_mode = "blocks_only";
    std::string objective = "reconstruction";
    double corruption_ratio = 0.6;
    double tau = 1.0;
    double lr = 1e-4;
    double weight_decay = 1e-5;
    int batch = 128;
    int threads = 1;
    int synthetic = 0;
    int synth_rows = 600, synth_cols = 8, synth_latent = 4;
    double synth_cat_fraction = 0.25;
    std::vector<std::string> data_files;
    std::vector<int> checkpoint_at{250, 500, 1000, 1500, 2000};
    std::string out = "out";
};

json pretrain_config_json(const PretrainArgs& a) {
    return json{{"cmd", "pretrain"},
                {"seed", a.seed},
                {"model", backbone_to_json(a.model)},
                {"rounds", a.rounds},
                {"n_local", a.n_local},
                {"share_mode", a.share_mode},
                {"objective", a.objective},
                {"corruption_ratio", a.corruption_ratio},
                {"tau", a.tau},
                {"lr", a.lr},
                {"weight_decay", a.weight_decay},
                {"batch", a.batch},
                {"synthetic", a.synthetic},
                {"synth_rows", a.synth_rows},
                {"synth_cols", a.synth_cols},
                {"synth_latent", a.synth_latent},
                {"data", a.data_files},
                {"checkpoint_at", a.checkpoint_at}};
}

template <class Real>
int run_pretrain(const PretrainArgs& a) {
    auto bb = a.model.config();
    xtab::FedConfig fed;
    fed.n_local = a.n_local;
    fed.share_mode = xtab::share_mode_from_name(a.share_mode);
    fed.lr = a.lr;
    fed.weight_decay = a.weight_decay;
    fed.batch_size = a.batch;
    fed.threads = a.threads;

    std::vector<xtab::TableDataset> tables;
    if (a.synthetic > 0) {
        xtab::SyntheticSpec spec;
        spec.n_tables = a.synthetic;
        spec.rows = a.synth_rows;
        spec.cols = a.synth_cols;
        spec.latent_dim = a.synth_latent;
        spec.cat_fraction = a.synth_cat_fraction;
        spec.seed = a.seed;
        tables = xtab::generate_synthetic_suite(spec);
    }
    for (const auto& f : a.data_files) tables.push_back(xtab::load_csv(f, load_sidecar(f)));
    if (tables.empty()) throw xtab::ConfigError("pretrain: no datasets (use --synthetic or --data)");

    const json cfg_json = pretrain_config_json(a);
    const std::string hash = config_hash(cfg_json);
    fs::create_directories(a.out);

    auto server = xtab::init_server<Real>(bb, fed, a.seed);
    std::vector<xtab::ClientState<Real>> clients;
    const std::vector<xtab::ObjectiveKind> mix{xtab::ObjectiveKind::reconstruction,
                                               xtab::ObjectiveKind::contrastive, xtab::ObjectiveKind::supervised};
    for (size_t k = 0; k < tables.size(); ++k) {
        xtab::ObjectiveConfig obj;
        obj.kind = a.objective == "mixed" ? mix[k % mix.size()] : xtab::objective_from_name(a.objective);
        obj.corruption.ratio = a.corruption_ratio;
        obj.tau = a.tau;
        obj.contrastive_dim = a.model.head_hidden;
        clients.push_back(xtab::make_client<Real>(static_cast<int>(k), tables[k], bb, fed, obj,
                                                  xtab::splitmix64(a.seed ^ (k + 1)), a.seed));
        std::cout << "client " << k << ": " << tables[k].name << " (" << xtab::objective_name(obj.kind) << ", "
                  << tables[k].n_rows() << " rows)\n";
    }

    auto save_ckpt = [&](int round) {
        const std::string path = (fs::path(a.out) / ("ckpt_round_" + std::to_string(round) + ".xtb")).string();
        xtab::checkpoint_save(path, bb, server.shared);
        json meta{{"config_hash", hash}, {"round", round},           {"seed", a.seed},
                  {"rounds", a.rounds},  {"objective", a.objective}, {"share_mode", a.share_mode},
                  {"n_local", a.n_local}};
        std::ofstream(path + ".meta.json") << meta.dump(2) << "\n";
        std::cout << "checkpoint: " << path << "\n";
    };

    auto log = xtab::pretrain_run(clients, server, a.rounds, a.checkpoint_at, save_ckpt);

    bool final_in_schedule = false;
    for (int cp : a.checkpoint_at) final_in_schedule |= cp == a.rounds;
    if (!final_in_schedule) save_ckpt(a.rounds);

    std::ofstream loss_log(fs::path(a.out) / "pretrain_log.csv");
    loss_log << "round,mean_client_loss\n";
    for (size_t r = 0; r < log.round_mean_loss.size(); ++r)
        loss_log << (r + 1) << "," << std::setprecision(10) << log.round_mean_loss[r] << "\n";

    std::cout << "rounds: " << a.rounds << "  aggregation_events: " << log.aggregation_events
              << "  clients: " << clients.size() << "\n";
    if (!log.round_mean_loss.empty())
        std::cout << "mean client loss: first " << log.round_mean_loss.front() << " -> last "
                  << log.round_mean_loss.back() << "\n";
    std::cout << "config_hash: " << hash << "\n";
    std::ofstream(fs::path(a.out) / "pretrain_config.json") << cfg_json.dump(2) << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// finetune
// ---------------------------------------------------------------------------

struct FinetuneArgs {
    CommonModelArgs model;
    std::string task_csv;
    uint64_t seed = 0;
    int trials = 5;
    std::string regime = "light";
    std::string init = "random";  // "random" or a checkpoint path
    double train_fraction = 1.0;
    bool with_baseline = false;
    double lr = 1e-4;
    double weight_decay = 1e-5;
    int batch = 128;
    int epoch_cap = 500;
    int threads = 1;
    std::string model_name;  // record label; defaults derived from init
    std::string out = "out";
};

json finetune_config_json(const FinetuneArgs& a) {
    return json{{"cmd", "finetune"},
                {"seed", a.seed},
                {"model", backbone_to_json(a.model)},
                {"task", a.task_csv},
                {"trials", a.trials},
                {"regime", a.regime},
                {"init", a.init},
                {"train_fraction", a.train_fraction},
                {"lr", a.lr},
                {"weight_decay", a.weight_decay},
                {"batch", a.batch},
                {"epoch_cap", a.epoch_cap}};
}

template <class Real>
int run_finetune(const FinetuneArgs& a) {
    auto task = xtab::load_csv(a.task_csv, load_sidecar(a.task_csv));
    const bool from_ckpt = a.init != "random";
    xtab::CheckpointData ckpt;
    auto bb = a.model.config();
    if (from_ckpt) {
        ckpt = xtab::checkpoint_load(a.init);
        // checkpoint header wins for the structural fields
        bb.variant = ckpt.variant;
        bb.n_blocks = ckpt.n_blocks;
        bb.d = ckpt.d;
        bb.n_heads = ckpt.n_heads;
    }

    const json cfg_json = finetune_config_json(a);
    const std::string hash = config_hash(cfg_json);
    fs::create_directories(a.out);
    const std::string results_path = (fs::path(a.out) / "results.jsonl").string();

    std::string model_label = a.model_name;
    if (model_label.empty()) model_label = from_ckpt ? fs::path(a.init).stem().string() : "baseline";

    struct TrialOutput {
        std::vector<xtab::MetricRecord> records;
    };
    std::vector<TrialOutput> outs(static_cast<size_t>(a.trials));

    auto run_trial = [&](int t) {
        const uint64_t trial_seed = a.seed + static_cast<uint64_t>(t);
        xtab::FinetuneConfig cfg;
        cfg.regime = xtab::regime_from_name(a.regime);
        cfg.train_fraction = a.train_fraction;
        cfg.batch_size = a.batch;
        cfg.lr = a.lr;
        cfg.weight_decay = a.weight_decay;
        cfg.hard_epoch_cap = a.epoch_cap;
        cfg.seed = a.seed;

        auto emit = [&](const std::string& label, const std::string& init_kind,
                        const xtab::FinetuneResult<Real>& r) {
            xtab::MetricRecord rec;
            rec.task = fs::path(a.task_csv).stem().string();
            rec.trial = t;
            rec.model = label;
            rec.regime = a.regime;
            rec.init = init_kind;
            rec.metric = xtab::metric_name(r.metric);
            rec.value = r.test_value;
            rec.seconds = r.seconds;
            rec.config_hash = hash;
            outs[static_cast<size_t>(t)].records.push_back(rec);
        };

        auto main_res = xtab::finetune<Real>(task, trial_seed, cfg, bb, from_ckpt ? &ckpt : nullptr);
        emit(model_label, from_ckpt ? "checkpoint" : "random", main_res);
        if (a.with_baseline && from_ckpt) {
            auto base_res = xtab::finetune<Real>(task, trial_seed, cfg, bb, nullptr);
            emit("baseline", "random", base_res);
        }
    };

    if (a.threads <= 1) {
        for (int t = 0; t < a.trials; ++t) run_trial(t);
    } else {
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(static_cast<size_t>(a.trials));
        const int nthreads = std::min(a.threads, a.trials);
        for (int w = 0; w < nthreads; ++w)
            pool.emplace_back([&, w] {
                for (int t = w; t < a.trials; t += nthreads) {
                    try {
                        run_trial(t);
                    } catch (...) {
                        errors[static_cast<size_t>(t)] = std::current_exception();
                    }
                }
            });
        for (auto& th : pool) th.join();
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    }

    for (const auto& o : outs)
        for (const auto& rec : o.records) {
            xtab::append_record(results_path, rec);
            std::cout << rec.task << " trial " << rec.trial << " " << rec.model << " " << rec.metric << " = "
                      << std::setprecision(6) << rec.value << "\n";
        }
    std::cout << "results appended to " << results_path << " (config_hash " << hash << ")\n";
    return 0;
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

struct ReportArgs {
    std::string results = "out/results.jsonl";
    std::string baseline = "baseline";
    std::string out = "out";
};

int run_report(const ReportArgs& a) {
    auto records = xtab::read_records(a.results);
    auto rep = xtab::aggregate_report(records, a.baseline);

    json jmodels = json::array();
    std::cout << std::left << std::setw(24) << "model" << std::setw(10) << "trials" << std::setw(12) << "win_rate"
              << std::setw(18) << "mean_rank" << std::setw(12) << "norm_perf" << "err_reduction\n";
    for (const auto& m : rep.models) {
        std::cout << std::left << std::setw(24) << m.model << std::setw(10) << m.trials << std::setw(12)
                  << std::setprecision(4) << m.win_rate_vs_baseline << std::setw(18)
                  << (std::to_string(m.mean_rank).substr(0, 6) + " +/- " + std::to_string(m.rank_std).substr(0, 5))
                  << std::setw(12) << m.mean_normalized << m.mean_error_reduction << "\n";
        jmodels.push_back(json{{"model", m.model},
                               {"trials", m.trials},
                               {"win_rate_vs_baseline", m.win_rate_vs_baseline},
                               {"mean_rank", m.mean_rank},
                               {"rank_std", m.rank_std},
                               {"mean_normalized", m.mean_normalized},
                               {"mean_error_reduction", m.mean_error_reduction}});
    }
    fs::create_directories(a.out);
    json jrep{{"baseline", rep.baseline},
              {"complete_trials", rep.complete_trials},
              {"dropped_trials", rep.dropped_trials},
              {"models", jmodels}};
    std::ofstream(fs::path(a.out) / "report.json") << jrep.dump(2) << "\n";

    std::ofstream csv(fs::path(a.out) / "report.csv");
    csv << "task,trial,model,metric,value,rank,normalized,error_reduction\n";
    for (const auto& r : rep.rows)
        csv << r.task << "," << r.trial << "," << r.model << "," << r.metric << "," << std::setprecision(10)
            << r.value << "," << r.rank << "," << r.normalized << "," << r.err_reduction << "\n";
    std::cout << "report written to " << (fs::path(a.out) / "report.json").string() << " and report.csv\n";
    return 0;
}

// ---------------------------------------------------------------------------
// inspect
// ---------------------------------------------------------------------------

struct InspectArgs {
    std::string checkpoint;
    int bins = 20;
};

bool histogram_excluded(const std::string& name) {
    // layer normalization and bias terms are excluded from weight histograms
    return name.find(".ln") != std::string::npos || name.ends_with(".bias") || name.ends_with(".gain");
}

int run_inspect(const InspectArgs& a) {
    auto cp = xtab::checkpoint_load(a.checkpoint);
    std::cout << "checkpoint: " << a.checkpoint << "\n"
              << "variant=" << xtab::variant_name(cp.variant) << " blocks=" << cp.n_blocks << " d=" << cp.d
              << " heads=" << cp.n_heads << " tensors=" << cp.tensors.size() << "\n\n";
    size_t total = 0;
    for (const auto& t : cp.tensors) {
        std::cout << std::left << std::setw(34) << t.name << xtab::shape_str(t.shape) << "  n=" << t.data.size()
                  << "\n";
        total += t.data.size();
    }
    std::cout << "total parameters: " << total << "\n\n";
    for (const auto& t : cp.tensors) {
        if (histogram_excluded(t.name) || t.data.empty()) continue;
        float mn = t.data[0], mx = t.data[0];
        double mean = 0;
        for (float v : t.data) {
            mn = std::min(mn, v);
            mx = std::max(mx, v);
            mean += v;
        }
        mean /= static_cast<double>(t.data.size());
        std::vector<size_t> hist(static_cast<size_t>(a.bins), 0);
        const float width = mx > mn ? (mx - mn) : 1.0f;
        for (float v : t.data) {
            int b = static_cast<int>((v - mn) / width * static_cast<float>(a.bins));
            b = std::clamp(b, 0, a.bins - 1);
            ++hist[static_cast<size_t>(b)];
        }
        size_t peak = 1;
        for (size_t h : hist) peak = std::max(peak, h);
        std::cout << t.name << "  min=" << mn << " max=" << mx << " mean=" << mean << "\n";
        for (int b = 0; b < a.bins; ++b) {
            const float lo = mn + width * static_cast<float>(b) / static_cast<float>(a.bins);
            const int bars = static_cast<int>(50.0 * static_cast<double>(hist[static_cast<size_t>(b)]) /
                                              static_cast<double>(peak));
            std::cout << "  " << std::setw(9) << std::setprecision(3) << lo << " | " << std::string(static_cast<size_t>(bars), '#')
                      << " " << hist[static_cast<size_t>(b)] << "\n";
        }
        std::cout << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"cross-table pretraining for tabular transformers"};
    app.require_subcommand(1);

    SynthArgs synth;
    auto* s = app.add_subcommand("synth", "generate a synthetic table suite as CSV files");
    s->add_option("--tables", synth.tables);
    s->add_option("--rows", synth.rows);
    s->add_option("--cols", synth.cols);
    s->add_option("--latent", synth.latent);
    s->add_option("--cat-fraction", synth.cat_fraction);
    s->add_option("--noise", synth.noise);
    s->add_option("--seed", synth.seed);
    s->add_option("--out", synth.out);

    PretrainArgs pre;
    auto* p = app.add_subcommand("pretrain", "federated cross-table pretraining");
    pre.model.add_flags(p);
    p->add_option("--seed", pre.seed);
    p->add_option("--rounds", pre.rounds);
    p->add_option("--n-local", pre.n_local);
    p->add_option("--share-mode", pre.share_mode, "blocks_only|blocks_plus_cls|first_block_only");
    p->add_option("--objective", pre.objective, "reconstruction|contrastive|supervised|mixed");
    p->add_option("--corruption-ratio", pre.corruption_ratio);
    p->add_option("--tau", pre.tau);
    p->add_option("--lr", pre.lr);
    p->add_option("--decay", pre.weight_decay);
    p->add_option("--batch", pre.batch);
    p->add_option("--threads", pre.threads);
    p->add_option("--synthetic", pre.synthetic, "number of synthetic pretraining tables");
    p->add_option("--synth-rows", pre.synth_rows);
    p->add_option("--synth-cols", pre.synth_cols);
    p->add_option("--synth-latent", pre.synth_latent);
    p->add_option("--synth-cat-fraction", pre.synth_cat_fraction);
    p->add_option("--data", pre.data_files, "CSV files, one client per table");
    p->add_option("--checkpoint-at", pre.checkpoint_at, "rounds at which to write checkpoints");
    p->add_option("--out", pre.out);

    FinetuneArgs ft;
    auto* f = app.add_subcommand("finetune", "finetune on a downstream table");
    ft.model.add_flags(f);
    f->add_option("--task", ft.task_csv, "downstream CSV")->required();
    f->add_option("--seed", ft.seed);
    f->add_option("--trials", ft.trials);
    f->add_option("--regime", ft.regime, "light|heavy|best");
    f->add_option("--init", ft.init, "'random' or a checkpoint path");
    f->add_option("--train-fraction", ft.train_fraction);
    f->add_flag("--with-baseline", ft.with_baseline, "also run a random-init baseline per trial");
    f->add_option("--lr", ft.lr);
    f->add_option("--decay", ft.weight_decay);
    f->add_option("--batch", ft.batch);
    f->add_option("--epoch-cap", ft.epoch_cap);
    f->add_option("--threads", ft.threads);
    f->add_option("--model-name", ft.model_name, "record label (default: checkpoint stem or 'baseline')");
    f->add_option("--out", ft.out);

    ReportArgs rep;
    auto* r = app.add_subcommand("report", "aggregate a results file");
    r->add_option("--results", rep.results);
    r->add_option("--baseline", rep.baseline);
    r->add_option("--out", rep.out);

    InspectArgs ins;
    auto* i = app.add_subcommand("inspect", "print checkpoint inventory and weight histograms");
    i->add_option("--checkpoint", ins.checkpoint)->required();
    i->add_option("--bins", ins.bins);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*s) return run_synth(synth);
        if (*p) return verify_mode() ? run_pretrain<double>(pre) : run_pretrain<float>(pre);
        if (*f) return verify_mode() ? run_finetune<double>(ft) : run_finetune<float>(ft);
        if (*r) return run_report(rep);
        if (*i) return run_inspect(ins);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
