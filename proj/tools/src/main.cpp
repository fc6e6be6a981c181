// saap: data generation, training and experiment sweeps over the sparse
// attention engine. Every flag can also come from a key=value file passed
// with --config; SAAP_DATA_DIR sets the default artifact directory.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "saap/experiments.hpp"
#include "saap/qmodel.hpp"
#include "saap/tensor_io.hpp"

namespace fs = std::filesystem;
using namespace saap;

namespace {

std::string default_data_dir() {
    const char* env = std::getenv("SAAP_DATA_DIR");
    return env && *env ? env : "data";
}

void add_head_flags(CLI::App* cmd, HeadSpec& spec) {
    cmd->add_option("--dim", spec.dim, "vector dimension");
    cmd->add_option("--n-clusters", spec.n_clusters, "key cluster count");
    cmd->add_option("--key-offset", spec.key_offset, "key cloud offset along the shared axis");
    cmd->add_option("--query-offset", spec.query_offset,
                    "query cloud offset (opposite sign to keys)");
    cmd->add_option("--key-center-scale", spec.key_center_scale, "cluster center magnitude");
    cmd->add_option("--cluster-code-scale", spec.cluster_code_scale,
                    "per-cluster low-frequency code magnitude");
    cmd->add_option("--key-noise", spec.key_noise, "key noise std on rotating dims");
    cmd->add_option("--stable-noise", spec.stable_noise, "key noise std on low-frequency dims");
    cmd->add_option("--sink-norm", spec.sink_norm, "norm of the sink key");
    cmd->add_option("--drift-rate", spec.drift_rate, "key drift per position");
    cmd->add_option("--query-noise", spec.query_noise, "query noise std");
    cmd->add_option("--query-pull", spec.query_pull, "query alignment with its cluster");
    cmd->add_option("--query-boost", spec.query_boost, "long-range lookup strength");
    cmd->add_option("--local-boost", spec.local_boost, "local lookup strength (0 disables)");
    cmd->add_option("--target-beacon", spec.target_beacon, "beacon magnitude on target keys");
    cmd->add_option("--ood-shift", spec.ood_shift, "query cloud translation");
    cmd->add_option("--planted-fraction", spec.planted_longrange_fraction,
                    "fraction of queries with a planted long-range lookup");
    cmd->add_option("--n-targets", spec.n_targets, "distinct long-range target keys");
    cmd->add_option("--local-range", spec.local_range, "max gap of local lookups");
    cmd->add_option("--longrange-threshold", spec.longrange_threshold,
                    "planted gaps exceed this");
    cmd->add_option("--window-guard", spec.window_guard,
                    "targets stay this far from the context end");
    cmd->add_option("--lowfreq-pairs", spec.lowfreq_pairs, "rotary pairs treated as stable");
    cmd->add_option("--rope-base", spec.rope_base, "rotary base");
}

void add_experiment_flags(CLI::App* cmd, ExperimentConfig& cfg,
                          std::vector<std::string>& methods) {
    cmd->add_option("--methods", methods, "selection methods to evaluate")->delimiter(',');
    cmd->add_option("--buckets", cfg.n_buckets, "partition size C");
    cmd->add_option("--bucket-counts", cfg.bucket_counts, "C values for the probe sweep")
            ->delimiter(',');
    cmd->add_option("--probes", cfg.probes, "probe counts l")->delimiter(',');
    cmd->add_option("--sample-fractions", cfg.sample_fractions,
                    "random sampling fractions (used when no partition method runs)")
            ->delimiter(',');
    cmd->add_option("--lsh-bits", cfg.lsh_bits, "hyperplane bits per table")->delimiter(',');
    cmd->add_option("--lsh-tables", cfg.lsh_tables, "hash table count");
    cmd->add_option("--lsh-threshold", cfg.lsh_threshold, "collision table threshold");
    cmd->add_option("--kde-bins", cfg.kde_bins, "Gray-code bin counts")->delimiter(',');
    cmd->add_option("--kde-bits", cfg.kde_bits, "Gray-code bits");
    cmd->add_option("--reformer-buckets", cfg.reformer_buckets, "argmax bucket counts")
            ->delimiter(',');
    cmd->add_option("--reformer-rounds", cfg.reformer_rounds, "hashing rounds");
    cmd->add_option("--sink", cfg.dense.sink_count, "dense sink keys");
    cmd->add_option("--recent", cfg.dense.recent_count, "dense recent keys");
    cmd->add_option("--block-size", cfg.block_size, "bucket scan block size");
    cmd->add_option("--kmeans-iters", cfg.kmeans_iters, "k-means iterations");
    cmd->add_flag("--balanced", cfg.balanced_partition,
                  "round-robin bucket layout instead of k-means");
    cmd->add_option("--n-keys", cfg.n_keys, "context length per prompt");
    cmd->add_option("--n-queries", cfg.n_queries, "queries per prompt");
    cmd->add_option("--prompts", cfg.n_prompts, "evaluation prompts per head");
    cmd->add_option("--head-seeds", cfg.head_seeds, "head seeds")->delimiter(',');
    cmd->add_option("--eval-seed", cfg.eval_seed, "seed for sampling baselines");
    cmd->add_option("--hidden", cfg.qtrain.hidden, "classifier hidden width");
    cmd->add_option("--steps", cfg.qtrain.steps, "classifier training steps");
    cmd->add_option("--batch", cfg.qtrain.batch, "classifier batch size");
    cmd->add_option("--lr", cfg.qtrain.lr, "classifier learning rate");
    cmd->add_option("--train-prompts", cfg.qtrain.train_prompts, "training prompts");
    cmd->add_option("--train-queries", cfg.qtrain.queries_per_prompt,
                    "queries per training prompt");
    add_head_flags(cmd, cfg.head_template);
}

void apply_methods(ExperimentConfig& cfg, const std::vector<std::string>& methods) {
    if (methods.empty()) {
        return;
    }
    cfg.methods.clear();
    for (const std::string& name : methods) {
        cfg.methods.push_back(method_from_name(name));
    }
}

void emit(const std::string& out, const std::string& text) {
    if (out == "-") {
        std::cout << text;
        return;
    }
    std::ofstream f(out);
    if (!f) {
        throw std::runtime_error("cannot write " + out);
    }
    f << text;
    if (!f.flush()) {
        throw std::runtime_error("short write to " + out);
    }
}

struct HeadFile {
    HeadSpec spec;
    std::size_t n_keys = 16384;
    std::size_t n_queries = 512;
    std::size_t n_prompts = 1;
};

void save_head_cfg(const HeadFile& hf, const fs::path& path) {
    std::ofstream f(path);
    if (!f) {
        throw std::runtime_error("cannot write " + path.string());
    }
    const HeadSpec& s = hf.spec;
    f << "dim=" << s.dim << '\n'
      << "n-clusters=" << s.n_clusters << '\n'
      << "key-offset=" << s.key_offset << '\n'
      << "query-offset=" << s.query_offset << '\n'
      << "key-center-scale=" << s.key_center_scale << '\n'
      << "cluster-code-scale=" << s.cluster_code_scale << '\n'
      << "key-noise=" << s.key_noise << '\n'
      << "stable-noise=" << s.stable_noise << '\n'
      << "sink-norm=" << s.sink_norm << '\n'
      << "drift-rate=" << s.drift_rate << '\n'
      << "query-noise=" << s.query_noise << '\n'
      << "query-pull=" << s.query_pull << '\n'
      << "query-boost=" << s.query_boost << '\n'
      << "local-boost=" << s.local_boost << '\n'
      << "target-beacon=" << s.target_beacon << '\n'
      << "ood-shift=" << s.ood_shift << '\n'
      << "planted-fraction=" << s.planted_longrange_fraction << '\n'
      << "n-targets=" << s.n_targets << '\n'
      << "local-range=" << s.local_range << '\n'
      << "longrange-threshold=" << s.longrange_threshold << '\n'
      << "window-guard=" << s.window_guard << '\n'
      << "lowfreq-pairs=" << s.lowfreq_pairs << '\n'
      << "rope-base=" << s.rope_base << '\n'
      << "seed=" << s.seed << '\n'
      << "n-keys=" << hf.n_keys << '\n'
      << "n-queries=" << hf.n_queries << '\n'
      << "prompts=" << hf.n_prompts << '\n';
    if (!f.flush()) {
        throw std::runtime_error("short write to " + path.string());
    }
}

HeadFile load_head_cfg(const fs::path& path) {
    if (!fs::exists(path)) {
        throw std::runtime_error("missing head config " + path.string() +
                                 " (run gen-data first)");
    }
    HeadFile hf;
    CLI::App app{"head config"};
    add_head_flags(&app, hf.spec);
    app.add_option("--seed", hf.spec.seed);
    app.add_option("--n-keys", hf.n_keys);
    app.add_option("--n-queries", hf.n_queries);
    app.add_option("--prompts", hf.n_prompts);
    app.set_config("--config");
    app.parse("--config \"" + path.string() + "\"", false);
    return hf;
}

fs::path head_dir(const std::string& data_dir, std::uint64_t seed) {
    return fs::path(data_dir) / ("head" + std::to_string(seed));
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"sparse attention experiment harness"};
    app.require_subcommand(1);

    std::string data_dir = default_data_dir();
    app.add_option("--data-dir", data_dir, "artifact directory (env SAAP_DATA_DIR)")
            ->envname("SAAP_DATA_DIR");
    // Config handling lives on the root app because CLI11 only reads config
    // files there; subcommand flags go under a [subcommand] section. The
    // subcommands use fallthrough so --config may follow the subcommand name.
    app.set_config("--config", "", "ini file; subcommand flags under a [subcommand] section");

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate synthetic prompts per head");
    gen->fallthrough();
    HeadFile gen_hf;
    std::vector<std::uint64_t> gen_seeds{1};
    add_head_flags(gen, gen_hf.spec);
    gen->add_option("--n-keys", gen_hf.n_keys, "context length");
    gen->add_option("--n-queries", gen_hf.n_queries, "queries per prompt");
    gen->add_option("--prompts", gen_hf.n_prompts, "prompts per head");
    gen->add_option("--head-seeds", gen_seeds, "head seeds")->delimiter(',');
    gen->callback([&] {
        for (std::uint64_t seed : gen_seeds) {
            HeadFile hf = gen_hf;
            hf.spec.seed = seed;
            const fs::path dir = head_dir(data_dir, seed);
            fs::create_directories(dir);
            save_head_cfg(hf, dir / "head.cfg");
            for (std::size_t k = 0; k < hf.n_prompts; ++k) {
                save_prompt(generate_prompt(hf.spec, hf.n_keys, hf.n_queries, k),
                            dir / ("prompt" + std::to_string(k)));
            }
        }
        std::cout << "wrote " << gen_seeds.size() << " head(s) x " << gen_hf.n_prompts
                  << " prompt(s) under " << data_dir << '\n';
    });

    // train-kmeans
    auto* tk = app.add_subcommand("train-kmeans", "train a head's key partition");
    tk->fallthrough();
    std::uint64_t tk_seed = 1;
    std::size_t tk_buckets = 256, tk_iters = 10, tk_sink = 1;
    tk->add_option("--head-seed", tk_seed, "head to train");
    tk->add_option("--buckets", tk_buckets, "partition size C");
    tk->add_option("--kmeans-iters", tk_iters, "iterations");
    tk->add_option("--sink", tk_sink, "sink keys excluded from the index");
    tk->callback([&] {
        const fs::path dir = head_dir(data_dir, tk_seed);
        HeadFile hf = load_head_cfg(dir / "head.cfg");
        KMeansStats stats;
        Partition p =
                train_head_partition(hf.spec, hf.n_keys, tk_buckets, tk_iters, tk_sink, &stats);
        partition_save(p, dir / "partition.tensor");
        std::cout << "trained partition C=" << p.n_buckets()
                  << " objective=" << (stats.objective_per_iter.empty()
                                               ? 0.0
                                               : stats.objective_per_iter.back())
                  << " repairs=" << stats.empty_cluster_repairs << '\n';
    });

    // train-qmodel
    auto* tq = app.add_subcommand("train-qmodel", "train a head's query classifier");
    tq->fallthrough();
    std::uint64_t tq_seed = 1;
    std::size_t tq_sink = 1;
    QTrainOptions tq_opts;
    std::string tq_loss_csv;
    tq->add_option("--head-seed", tq_seed, "head to train");
    tq->add_option("--sink", tq_sink, "sink keys excluded from training");
    tq->add_option("--hidden", tq_opts.hidden, "hidden width");
    tq->add_option("--steps", tq_opts.steps, "Adam steps");
    tq->add_option("--batch", tq_opts.batch, "batch size");
    tq->add_option("--lr", tq_opts.lr, "learning rate");
    tq->add_option("--train-prompts", tq_opts.train_prompts, "training prompts");
    tq->add_option("--train-queries", tq_opts.queries_per_prompt,
                   "queries per training prompt");
    tq->add_option("--loss-csv", tq_loss_csv, "optional loss curve output");
    tq->callback([&] {
        const fs::path dir = head_dir(data_dir, tq_seed);
        HeadFile hf = load_head_cfg(dir / "head.cfg");
        Partition p = partition_load(dir / "partition.tensor");
        std::vector<double> curve;
        QModel model = train_head_qmodel(hf.spec, p, tq_opts, hf.n_keys, tq_sink, &curve);
        qmodel_save(model, dir / "qmodel");
        if (!tq_loss_csv.empty()) {
            CsvTable t;
            t.name = "train_loss";
            t.columns = {"step", "loss"};
            for (std::size_t i = 0; i < curve.size(); ++i) {
                char buf[48];
                std::snprintf(buf, sizeof buf, "%.10g", curve[i]);
                t.add_row({std::to_string(i), buf});
            }
            t.write(tq_loss_csv);
        }
        std::cout << "trained classifier h=" << model.hidden() << " first_loss="
                  << (curve.empty() ? 0.0 : curve.front())
                  << " last_loss=" << (curve.empty() ? 0.0 : curve.back()) << '\n';
    });

    // build-index
    auto* bi = app.add_subcommand("build-index", "assign and index a stored prompt");
    bi->fallthrough();
    std::uint64_t bi_seed = 1;
    std::size_t bi_prompt = 0, bi_sink = 1;
    bi->add_option("--head-seed", bi_seed, "head");
    bi->add_option("--prompt", bi_prompt, "prompt number");
    bi->add_option("--sink", bi_sink, "sink keys excluded from the index");
    bi->callback([&] {
        const fs::path dir = head_dir(data_dir, bi_seed);
        HeadFile hf = load_head_cfg(dir / "head.cfg");
        Partition p = partition_load(dir / "partition.tensor");
        const fs::path pdir = dir / ("prompt" + std::to_string(bi_prompt));
        SyntheticPrompt prompt = load_prompt(pdir);
        ContextStore store =
                build_context_store(prompt.keys_roped, prompt.values, hf.spec.rope(), p, bi_sink);
        std::vector<std::uint64_t> wide(store.assignment.bucket_of.begin(),
                                        store.assignment.bucket_of.end());
        u64_write(wide, pdir / "assignment.tensor");
        ivf_save(store.index, pdir / "off.tensor", pdir / "idx.tensor");
        std::cout << "indexed " << store.assignment.size() << " keys into "
                  << store.n_buckets() << " buckets\n";
    });

    // experiment subcommands share the config surface
    struct ExpCmd {
        CLI::App* cmd = nullptr;
        ExperimentConfig cfg;
        std::vector<std::string> methods;
        std::string out = "-";
    };
    auto make_exp = [&](const char* name, const char* help) {
        auto holder = std::make_shared<ExpCmd>();
        holder->cmd = app.add_subcommand(name, help);
        holder->cmd->fallthrough();
        add_experiment_flags(holder->cmd, holder->cfg, holder->methods);
        holder->cmd->add_option("--out", holder->out, "output path, - for stdout");
        return holder;
    };

    auto ev = make_exp("eval-mse", "MSE against exact attention per method and parameter");
    ev->cmd->callback([ev, &ev_ref = *ev] {
        ExperimentConfig cfg = ev_ref.cfg;
        apply_methods(cfg, ev_ref.methods);
        auto heads = make_head_data(cfg);
        const bool with_q = std::find(cfg.methods.begin(), cfg.methods.end(), Method::saap) !=
                            cfg.methods.end();
        std::vector<TrainedHead> artifacts;
        for (const HeadData& hd : heads) {
            artifacts.push_back(train_head(hd.spec, cfg, with_q));
        }
        emit(ev_ref.out, run_mse_selectivity(cfg, heads, artifacts).to_string());
    });

    auto cb = make_exp("compare-baselines",
                       "eval-mse preset covering every selection baseline");
    cb->cmd->callback([cb, &cb_ref = *cb] {
        ExperimentConfig cfg = cb_ref.cfg;
        if (cb_ref.methods.empty()) {
            cfg.methods = {Method::kmeans, Method::magicpig, Method::kdeformer,
                           Method::reformer, Method::random};
        } else {
            apply_methods(cfg, cb_ref.methods);
        }
        auto heads = make_head_data(cfg);
        std::vector<TrainedHead> artifacts;
        for (const HeadData& hd : heads) {
            artifacts.push_back(train_head(hd.spec, cfg, false));
        }
        emit(cb_ref.out, run_mse_selectivity(cfg, heads, artifacts).to_string());
    });

    auto sp = make_exp("sweep-probes", "selectivity and coverage across (C, l)");
    sp->cmd->callback([sp, &sp_ref = *sp] {
        ExperimentConfig cfg = sp_ref.cfg;
        apply_methods(cfg, sp_ref.methods);
        auto heads = make_head_data(cfg);
        emit(sp_ref.out, run_probe_sweep(cfg, heads).to_string());
    });

    auto ca = make_exp("compare-assigners",
                       "coverage of centroid routing vs the trained classifier");
    ca->cmd->callback([ca, &ca_ref = *ca] {
        ExperimentConfig cfg = ca_ref.cfg;
        apply_methods(cfg, ca_ref.methods);
        auto heads = make_head_data(cfg);
        std::vector<TrainedHead> artifacts;
        for (const HeadData& hd : heads) {
            artifacts.push_back(train_head(hd.spec, cfg, true));
        }
        emit(ca_ref.out, run_assignment_comparison(cfg, heads, artifacts).to_string());
    });

    auto dg = make_exp("diagnostics",
                       "attention span, bucket balance and assignment overlap tables");
    dg->cmd->callback([dg, &dg_ref = *dg] {
        ExperimentConfig cfg = dg_ref.cfg;
        apply_methods(cfg, dg_ref.methods);
        auto heads = make_head_data(cfg);
        std::vector<TrainedHead> artifacts;
        for (const HeadData& hd : heads) {
            artifacts.push_back(train_head(hd.spec, cfg, false));
        }
        emit(dg_ref.out, run_diagnostics(cfg, heads, artifacts).to_string());
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            return app.exit(e);
        }
        std::cerr << "error: " << e.what() << '\n';
        return e.get_exit_code();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
