#include "saap/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "saap/baselines.hpp"
#include "saap/tensor_io.hpp"

namespace saap {

namespace {

// Reserved prompt-seed range for training so evaluation prompts (seeds
// 0..n_prompts-1) are never seen during training.
constexpr std::uint64_t kPartitionPromptSeed = std::uint64_t{1} << 20;
constexpr std::uint64_t kTrainPromptBase = (std::uint64_t{1} << 20) + 1;
constexpr std::uint64_t kKmeansStream = std::uint64_t{2} << 32;
constexpr std::uint64_t kQInitStream = (std::uint64_t{2} << 32) + 1;
constexpr std::uint64_t kQShuffleStream = (std::uint64_t{2} << 32) + 2;

std::string fmt_g(double v) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

std::string fmt_param(double v) {
    if (v == std::floor(v) && std::abs(v) < 1e15) {
        return std::to_string(static_cast<long long>(v));
    }
    return fmt_g(v);
}

TensorBlock slice_rows(const TensorBlock& src, std::size_t begin, std::size_t end) {
    TensorBlock out(end - begin, src.dim);
    std::copy(src.row(begin), src.row(begin) + (end - begin) * src.dim, out.row(0));
    return out;
}

TensorBlock gather_rows(const TensorBlock& src, std::span<const std::size_t> ids) {
    TensorBlock out(ids.size(), src.dim);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        std::copy(src.row(ids[i]), src.row(ids[i]) + src.dim, out.row(i));
    }
    return out;
}

TensorBlock row_block(const TensorBlock& src, std::size_t i) {
    return slice_rows(src, i, i + 1);
}

void fill_unit_rows(TensorBlock& block, Rng& rng) {
    for (std::size_t i = 0; i < block.rows; ++i) {
        float* row = block.row(i);
        double norm = 0.0;
        while (norm == 0.0) {
            norm = 0.0;
            for (std::size_t j = 0; j < block.dim; ++j) {
                double x = rng.normal();
                row[j] = static_cast<float>(x);
                norm += x * x;
            }
            norm = std::sqrt(norm);
        }
        for (std::size_t j = 0; j < block.dim; ++j) {
            row[j] = static_cast<float>(row[j] / norm);
        }
    }
}

bool is_partition_method(Method m) {
    return m == Method::kmeans || m == Method::kmeans_roped || m == Method::saap ||
           m == Method::streaming;
}

/// Per-prompt evaluation state shared by every method point.
struct PromptCtx {
    const SyntheticPrompt* prompt = nullptr;
    ContextStore store;
    TensorBlock full_out;           // exact attention over all keys
    TensorBlock keys_ns;            // roped non-sink keys, the selector input
    std::vector<std::uint64_t> window_ids;
    std::size_t recent_begin = 0;
};

std::vector<std::vector<PromptCtx>> build_contexts(const ExperimentConfig& cfg,
                                                   const std::vector<HeadData>& heads,
                                                   const std::vector<TrainedHead>& artifacts,
                                                   bool with_reference) {
    std::vector<std::vector<PromptCtx>> ctx(heads.size());
    for (std::size_t h = 0; h < heads.size(); ++h) {
        ctx[h].resize(heads[h].prompts.size());
        for (std::size_t k = 0; k < heads[h].prompts.size(); ++k) {
            PromptCtx& c = ctx[h][k];
            c.prompt = &heads[h].prompts[k];
            c.store = make_store(cfg, artifacts[h], *c.prompt);
            const std::size_t n = c.store.n_keys();
            const std::size_t sink = cfg.dense.sink_count;
            c.recent_begin = n > cfg.dense.recent_count ? n - cfg.dense.recent_count : sink;
            c.recent_begin = std::max(c.recent_begin, sink);
            for (std::size_t i = 0; i < sink; ++i) {
                c.window_ids.push_back(i);
            }
            for (std::size_t i = c.recent_begin; i < n; ++i) {
                c.window_ids.push_back(i);
            }
            c.keys_ns = slice_rows(c.store.keys, sink, n);
            if (with_reference) {
                c.full_out = full_attention(c.prompt->queries_roped, c.store.keys,
                                            c.store.values);
            }
        }
    }
    return ctx;
}

struct MsePoint {
    double sel = 0.0;
    double mse_v = 0.0;
};

} // namespace

Method method_from_name(const std::string& name) {
    if (name == "kmeans") return Method::kmeans;
    if (name == "kmeans_roped") return Method::kmeans_roped;
    if (name == "saap") return Method::saap;
    if (name == "streaming") return Method::streaming;
    if (name == "magicpig") return Method::magicpig;
    if (name == "kdeformer") return Method::kdeformer;
    if (name == "reformer") return Method::reformer;
    if (name == "random") return Method::random;
    throw std::invalid_argument("unknown method '" + name + "'");
}

std::string method_name(Method m) {
    switch (m) {
    case Method::kmeans: return "kmeans";
    case Method::kmeans_roped: return "kmeans_roped";
    case Method::saap: return "saap";
    case Method::streaming: return "streaming";
    case Method::magicpig: return "magicpig";
    case Method::kdeformer: return "kdeformer";
    case Method::reformer: return "reformer";
    case Method::random: return "random";
    }
    throw std::invalid_argument("unknown method id");
}

void CsvTable::add_row(std::vector<std::string> row) {
    if (row.size() != columns.size()) {
        throw std::invalid_argument("csv row width " + std::to_string(row.size()) +
                                    " does not match " + std::to_string(columns.size()) +
                                    " columns of table " + name);
    }
    rows.push_back(std::move(row));
}

std::string CsvTable::to_string() const {
    std::ostringstream out;
    out << "# saap " << name << ' ' << version << '\n';
    for (std::size_t j = 0; j < columns.size(); ++j) {
        out << (j ? "," : "") << columns[j];
    }
    out << '\n';
    for (const auto& row : rows) {
        for (std::size_t j = 0; j < row.size(); ++j) {
            out << (j ? "," : "") << row[j];
        }
        out << '\n';
    }
    return out.str();
}

void CsvTable::write(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) {
        throw IoError(IoErrorKind::OpenFailed, "cannot write " + path.string());
    }
    out << to_string();
    if (!out.flush()) {
        throw IoError(IoErrorKind::OpenFailed, "short write to " + path.string());
    }
}

void ExperimentConfig::validate() const {
    if (methods.empty()) {
        throw std::invalid_argument("config: methods list is empty");
    }
    if (head_seeds.empty()) {
        throw std::invalid_argument("config: head_seeds is empty");
    }
    if (n_prompts < 1 || n_queries < 1) {
        throw std::invalid_argument("config: need at least one prompt and one query");
    }
    if (n_buckets < 1) {
        throw std::invalid_argument("config: n_buckets must be >= 1");
    }
    if (block_size < 1) {
        throw std::invalid_argument("config: block_size must be >= 1");
    }
    if (n_keys <= dense.sink_count + dense.recent_count) {
        throw std::invalid_argument("config: dense window covers the whole context");
    }
    if (dense.sink_count < 1) {
        throw std::invalid_argument("config: need at least one sink key");
    }
    for (Method m : methods) {
        if (is_partition_method(m) && m != Method::streaming) {
            for (std::size_t l : probes) {
                if (l > n_buckets) {
                    throw std::invalid_argument("config: probe count " + std::to_string(l) +
                                                " exceeds n_buckets");
                }
            }
            if (probes.empty()) {
                throw std::invalid_argument("config: partition methods need a probes list");
            }
        }
    }
    for (double f : sample_fractions) {
        if (f <= 0.0 || f > 1.0) {
            throw std::invalid_argument("config: sample fractions must lie in (0, 1]");
        }
    }
    for (std::size_t b : lsh_bits) {
        if (b < 1 || b > 63) {
            throw std::invalid_argument("config: lsh bits must lie in [1, 63]");
        }
    }
    if (lsh_threshold < 1 || lsh_threshold > lsh_tables) {
        throw std::invalid_argument("config: lsh threshold must lie in [1, n_tables]");
    }
    if (kde_bits < 1 || kde_bits > 63) {
        throw std::invalid_argument("config: kde bits must lie in [1, 63]");
    }
    for (std::size_t b : kde_bins) {
        if (b < 1) {
            throw std::invalid_argument("config: kde bin counts must be >= 1");
        }
    }
    for (std::size_t b : reformer_buckets) {
        if (b < 1) {
            throw std::invalid_argument("config: reformer bucket counts must be >= 1");
        }
    }
    if (reformer_rounds < 1) {
        throw std::invalid_argument("config: reformer rounds must be >= 1");
    }
    if (qtrain.batch < 2) {
        throw std::invalid_argument("config: training batch must be >= 2");
    }
    if (qtrain.hidden < 1 || qtrain.steps < 1 || qtrain.train_prompts < 1 ||
        qtrain.queries_per_prompt < 1) {
        throw std::invalid_argument("config: training sizes must be >= 1");
    }
    if (qtrain.lr <= 0.0) {
        throw std::invalid_argument("config: learning rate must be positive");
    }
}

std::vector<HeadData> make_head_data(const ExperimentConfig& cfg) {
    cfg.validate();
    std::vector<HeadData> heads;
    heads.reserve(cfg.head_seeds.size());
    for (std::uint64_t seed : cfg.head_seeds) {
        HeadData hd;
        hd.spec = cfg.head_template;
        hd.spec.seed = seed;
        for (std::size_t k = 0; k < cfg.n_prompts; ++k) {
            hd.prompts.push_back(generate_prompt(hd.spec, cfg.n_keys, cfg.n_queries, k));
        }
        heads.push_back(std::move(hd));
    }
    return heads;
}

Partition train_head_partition(const HeadSpec& spec, std::size_t n_keys, std::size_t n_buckets,
                               std::size_t kmeans_iters, std::size_t sink_count,
                               KMeansStats* stats) {
    // Only the keys matter here, so the query-side shift has no effect.
    SyntheticPrompt prompt = generate_prompt(spec, n_keys, 1, kPartitionPromptSeed);
    if (prompt.n_keys() <= sink_count) {
        throw std::invalid_argument("train_head_partition: no keys beyond the sink span");
    }
    TensorBlock keys_ns = slice_rows(prompt.keys_deroped, sink_count, prompt.n_keys());
    Rng rng = Rng(spec.seed).child(kKmeansStream);
    return kmeans_train(keys_ns, n_buckets, kmeans_iters, rng, stats);
}

QModel train_head_qmodel(const HeadSpec& spec, const Partition& partition,
                         const QTrainOptions& opts, std::size_t n_keys, std::size_t sink_count,
                         std::vector<double>* loss_curve) {
    if (partition.dim() != spec.dim) {
        throw std::invalid_argument("train_head_qmodel: partition dim does not match the head");
    }
    const std::size_t n_buckets = partition.n_buckets();
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(spec.dim));
    // Training queries come from the head's own query distribution, shift and
    // all. The centroids only ever see keys; this asymmetry is the point.
    const HeadSpec& train_spec = spec;

    struct Pool {
        TensorBlock queries_deroped;
        Mat target;
        std::vector<std::size_t> order;
        std::size_t cursor = 0;
    };
    std::vector<Pool> pools;
    for (std::size_t t = 0; t < opts.train_prompts; ++t) {
        SyntheticPrompt prompt =
                generate_prompt(train_spec, n_keys, opts.queries_per_prompt, kTrainPromptBase + t);
        const std::size_t n = prompt.n_keys();
        TensorBlock keys_ns = slice_rows(prompt.keys_roped, sink_count, n);
        std::span<const std::uint64_t> kpos_ns(prompt.key_positions.data() + sink_count,
                                               n - sink_count);
        TensorBlock scores = matmul_scaled(prompt.queries_roped, keys_ns, inv_sqrt_d);
        std::vector<std::size_t> retained = sample_long_range(
                prompt.query_positions, kpos_ns, scores, spec.longrange_threshold);
        if (retained.size() < 2) {
            continue;
        }
        KeyAssignment assignment =
                assign_keys(slice_rows(prompt.keys_deroped, sink_count, n), partition);
        Pool pool;
        pool.queries_deroped = gather_rows(prompt.queries_deroped, retained);
        pool.target = attention_target_rows(gather_rows(prompt.queries_roped, retained), keys_ns,
                                            assignment, n_buckets);
        pool.order.resize(retained.size());
        std::iota(pool.order.begin(), pool.order.end(), std::size_t{0});
        pools.push_back(std::move(pool));
    }
    if (pools.empty()) {
        throw std::runtime_error(
                "train_head_qmodel: no prompt retained 2+ long-range queries; raise "
                "planted_longrange_fraction or lower longrange_threshold");
    }

    Rng init_rng = Rng(spec.seed).child(kQInitStream);
    QModel model = qmodel_init(spec.dim, opts.hidden, n_buckets, init_rng);
    TrainerState state;
    state.lr = opts.lr;
    Rng shuffle_rng = Rng(spec.seed).child(kQShuffleStream);

    for (std::size_t step = 0; step < opts.steps; ++step) {
        Pool& pool = pools[step % pools.size()];
        const std::size_t rows = pool.order.size();
        const std::size_t take = std::min(opts.batch, rows);
        if (pool.cursor + take > rows) {
            shuffle_rng.shuffle(pool.order);
            pool.cursor = 0;
        }
        TensorBlock batch_q(take, spec.dim);
        Mat batch_t(take, n_buckets);
        for (std::size_t i = 0; i < take; ++i) {
            const std::size_t r = pool.order[pool.cursor + i];
            std::copy(pool.queries_deroped.row(r), pool.queries_deroped.row(r) + spec.dim,
                      batch_q.row(i));
            for (std::size_t c = 0; c < n_buckets; ++c) {
                batch_t.at(i, c) = pool.target.at(r, c);
            }
        }
        pool.cursor += take;
        const double loss = train_step_on_target(model, state, batch_q, batch_t);
        if (loss_curve) {
            loss_curve->push_back(loss);
        }
    }
    return model;
}

TrainedHead train_head(const HeadSpec& spec, const ExperimentConfig& cfg, bool with_qmodel) {
    TrainedHead out;
    out.spec = spec;
    out.partition = train_head_partition(spec, cfg.n_keys, cfg.n_buckets, cfg.kmeans_iters,
                                         cfg.dense.sink_count);
    if (with_qmodel) {
        out.qmodel = train_head_qmodel(spec, out.partition, cfg.qtrain, cfg.n_keys,
                                       cfg.dense.sink_count);
        out.has_qmodel = true;
    }
    return out;
}

ContextStore build_balanced_store(const TensorBlock& keys_roped, const TensorBlock& values,
                                  std::size_t n_buckets, std::size_t sink_count, Rng& rng) {
    if (keys_roped.rows <= sink_count) {
        throw std::invalid_argument("build_balanced_store: no keys beyond the sink span");
    }
    ContextStore store;
    store.keys = keys_roped;
    store.values = values;
    store.id_offset = sink_count;
    store.partition.centroids = TensorBlock(n_buckets, keys_roped.dim);
    fill_unit_rows(store.partition.centroids, rng);
    store.assignment.bucket_of.resize(keys_roped.rows - sink_count);
    for (std::size_t i = 0; i < store.assignment.bucket_of.size(); ++i) {
        store.assignment.bucket_of[i] = static_cast<std::uint32_t>(i % n_buckets);
    }
    store.index = build_ivf(store.assignment, n_buckets);
    return store;
}

ContextStore make_store(const ExperimentConfig& cfg, const TrainedHead& artifact,
                        const SyntheticPrompt& prompt) {
    if (cfg.balanced_partition) {
        Rng rng(cfg.eval_seed);
        return build_balanced_store(prompt.keys_roped, prompt.values, cfg.n_buckets,
                                    cfg.dense.sink_count, rng);
    }
    return build_context_store(prompt.keys_roped, prompt.values, artifact.spec.rope(),
                               artifact.partition, cfg.dense.sink_count);
}

namespace {

/// Mean selectivity and MSE of a partition-routed method over one prompt.
MsePoint eval_partition_point(const ExperimentConfig& cfg, const PromptCtx& c,
                              const BucketRouter& router, std::size_t l) {
    const SyntheticPrompt& p = *c.prompt;
    const std::size_t n_q = p.n_queries();
    TensorBlock out(n_q, c.store.values.dim);
    double sel_sum = 0.0;
    SparseAttnConfig sc;
    sc.probes = l;
    sc.block_size = cfg.block_size;
    sc.dense = cfg.dense;
    for (std::size_t q = 0; q < n_q; ++q) {
        AttnResult r = sparse_attention(row_block(p.queries_roped, q),
                                        row_block(p.queries_deroped, q), c.store, router, sc);
        std::copy(r.output.row(0), r.output.row(0) + out.dim, out.row(q));
        sel_sum += selectivity(r, c.store.n_keys());
    }
    return {sel_sum / static_cast<double>(n_q), mse(out, c.full_out)};
}

/// Mean selectivity and MSE of an explicit per-query id selection over one
/// prompt. select(q) returns local ids into keys_ns.
template <typename SelectFn>
MsePoint eval_selection_point(const ExperimentConfig& cfg, const PromptCtx& c, SelectFn&& select) {
    const SyntheticPrompt& p = *c.prompt;
    const std::size_t n_q = p.n_queries();
    const std::size_t n = c.store.n_keys();
    const std::size_t sink = cfg.dense.sink_count;
    TensorBlock out(n_q, c.store.values.dim);
    double sel_sum = 0.0;
    for (std::size_t q = 0; q < n_q; ++q) {
        TensorBlock q_roped = row_block(p.queries_roped, q);
        std::vector<std::uint64_t> ids = c.window_ids;
        for (std::uint64_t local : select(q_roped)) {
            const std::uint64_t gid = local + sink;
            if (gid < c.recent_begin) {
                ids.push_back(gid);
            }
        }
        TensorBlock row = attention_over_ids(q_roped, c.store.keys, c.store.values, ids);
        std::copy(row.row(0), row.row(0) + out.dim, out.row(q));
        sel_sum += static_cast<double>(ids.size()) / static_cast<double>(n);
    }
    return {sel_sum / static_cast<double>(n_q), mse(out, c.full_out)};
}

struct RawRow {
    std::string method;
    double param;
    double sel;
    double mse_v;
};

} // namespace

CsvTable run_mse_selectivity(const ExperimentConfig& cfg, const std::vector<HeadData>& heads,
                             const std::vector<TrainedHead>& artifacts) {
    cfg.validate();
    if (heads.empty() || heads.front().prompts.empty()) {
        throw std::invalid_argument("run_mse_selectivity: no prompts to evaluate");
    }
    if (heads.size() != artifacts.size()) {
        throw std::invalid_argument("run_mse_selectivity: heads and artifacts differ in length");
    }
    const bool needs_model =
            std::find(cfg.methods.begin(), cfg.methods.end(), Method::saap) != cfg.methods.end();
    for (std::size_t h = 0; h < heads.size(); ++h) {
        if (needs_model && !artifacts[h].has_qmodel) {
            throw std::invalid_argument("run_mse_selectivity: saap method requires a trained "
                                        "query model for every head");
        }
    }

    auto ctx = build_contexts(cfg, heads, artifacts, true);
    Rng eval_rng(cfg.eval_seed);
    std::size_t total_prompts = 0;
    for (const auto& per_head : ctx) {
        total_prompts += per_head.size();
    }
    const double inv_prompts = 1.0 / static_cast<double>(total_prompts);

    std::vector<RawRow> raw;
    auto eval_over_prompts = [&](Method m, double param, auto&& point_fn) {
        double sel = 0.0;
        double err = 0.0;
        for (std::size_t h = 0; h < heads.size(); ++h) {
            for (PromptCtx& c : ctx[h]) {
                MsePoint pt = point_fn(h, c);
                sel += pt.sel;
                err += pt.mse_v;
            }
        }
        raw.push_back({method_name(m), param, sel * inv_prompts, err * inv_prompts});
    };

    bool want_random = false;
    for (Method m : cfg.methods) {
        switch (m) {
        case Method::kmeans:
        case Method::kmeans_roped:
        case Method::saap:
            for (std::size_t l : cfg.probes) {
                eval_over_prompts(m, static_cast<double>(l), [&](std::size_t h, PromptCtx& c) {
                    if (m == Method::saap) {
                        QModelRouter router(artifacts[h].qmodel);
                        return eval_partition_point(cfg, c, router, l);
                    }
                    CentroidRouter router(artifacts[h].partition, m == Method::kmeans);
                    return eval_partition_point(cfg, c, router, l);
                });
            }
            break;
        case Method::streaming:
            eval_over_prompts(m, 0.0, [&](std::size_t h, PromptCtx& c) {
                CentroidRouter router(artifacts[h].partition, true);
                return eval_partition_point(cfg, c, router, 0);
            });
            break;
        case Method::magicpig:
            for (std::size_t bits : cfg.lsh_bits) {
                eval_over_prompts(m, static_cast<double>(bits), [&](std::size_t, PromptCtx& c) {
                    LshEnsemble ens = build_lsh_ensemble(c.keys_ns, cfg.lsh_tables, bits,
                                                         cfg.lsh_threshold, eval_rng);
                    return eval_selection_point(cfg, c, [&](const TensorBlock& q) {
                        return magicpig_candidates(std::span<const float>(q.row(0), q.dim), ens);
                    });
                });
            }
            break;
        case Method::kdeformer:
            for (std::size_t bins : cfg.kde_bins) {
                eval_over_prompts(m, static_cast<double>(bins), [&](std::size_t, PromptCtx& c) {
                    KdeformerIndex idx = build_kdeformer(c.keys_ns, cfg.kde_bits, bins, eval_rng);
                    return eval_selection_point(cfg, c, [&](const TensorBlock& q) {
                        return kdeformer_select(std::span<const float>(q.row(0), q.dim), idx);
                    });
                });
            }
            break;
        case Method::reformer:
            for (std::size_t nb : cfg.reformer_buckets) {
                eval_over_prompts(m, static_cast<double>(nb), [&](std::size_t, PromptCtx& c) {
                    const std::size_t chunk = (c.keys_ns.rows + nb - 1) / nb;
                    ReformerIndex idx = build_reformer(c.keys_ns, nb, chunk,
                                                       cfg.reformer_rounds, eval_rng);
                    return eval_selection_point(cfg, c, [&](const TensorBlock& q) {
                        return reformer_select(std::span<const float>(q.row(0), q.dim), idx);
                    });
                });
            }
            break;
        case Method::random:
            want_random = true; // deferred: needs the other methods' selectivities
            break;
        }
    }

    if (want_random) {
        std::vector<double> targets;
        if (!raw.empty()) {
            for (const RawRow& r : raw) {
                targets.push_back(r.sel);
            }
        } else {
            targets = cfg.sample_fractions;
            if (targets.empty()) {
                throw std::invalid_argument(
                        "run_mse_selectivity: random method alone needs sample_fractions");
            }
        }
        std::sort(targets.begin(), targets.end());
        targets.erase(std::unique(targets.begin(), targets.end(),
                                  [](double a, double b) { return std::abs(a - b) < 1e-9; }),
                      targets.end());
        for (double s : targets) {
            eval_over_prompts(Method::random, s, [&](std::size_t, PromptCtx& c) {
                const std::size_t n = c.store.n_keys();
                const std::size_t eligible = c.recent_begin - cfg.dense.sink_count;
                const long long want =
                        std::llround(s * static_cast<double>(n)) -
                        static_cast<long long>(c.window_ids.size());
                const std::size_t m_take = static_cast<std::size_t>(
                        std::clamp<long long>(want, 0, static_cast<long long>(eligible)));
                return eval_selection_point(cfg, c, [&](const TensorBlock&) {
                    return random_sample_select(eligible, m_take, eval_rng);
                });
            });
        }
    }

    std::sort(raw.begin(), raw.end(), [](const RawRow& a, const RawRow& b) {
        if (a.method != b.method) return a.method < b.method;
        if (a.sel != b.sel) return a.sel < b.sel;
        return a.param < b.param;
    });
    CsvTable t;
    t.name = "mse_selectivity";
    t.columns = {"method", "param", "selectivity", "mse"};
    for (const RawRow& r : raw) {
        t.add_row({r.method, fmt_param(r.param), fmt_g(r.sel), fmt_g(r.mse_v)});
    }
    return t;
}

CsvTable run_probe_sweep(const ExperimentConfig& cfg, const std::vector<HeadData>& heads) {
    cfg.validate();
    std::vector<std::size_t> bucket_counts =
            cfg.bucket_counts.empty() ? std::vector<std::size_t>{cfg.n_buckets}
                                      : cfg.bucket_counts;
    CsvTable t;
    t.name = "probe_sweep";
    t.columns = {"C", "l", "selectivity", "coverage", "max_visited_bucket"};

    for (std::size_t C : bucket_counts) {
        for (std::size_t l : cfg.probes) {
            if (l > C) {
                throw std::invalid_argument("run_probe_sweep: probe count exceeds C");
            }
        }
        // stores for this C, one per (head, prompt)
        std::vector<std::vector<ContextStore>> stores(heads.size());
        for (std::size_t h = 0; h < heads.size(); ++h) {
            ExperimentConfig local = cfg;
            local.n_buckets = C;
            TrainedHead artifact;
            artifact.spec = heads[h].spec;
            if (!cfg.balanced_partition) {
                artifact.partition = train_head_partition(heads[h].spec, cfg.n_keys, C,
                                                          cfg.kmeans_iters, cfg.dense.sink_count);
            }
            for (const SyntheticPrompt& p : heads[h].prompts) {
                stores[h].push_back(make_store(local, artifact, p));
            }
        }
        for (std::size_t l : cfg.probes) {
            double sel_sum = 0.0;
            double cov_sum = 0.0;
            std::size_t max_visited = 0;
            std::size_t n_terms = 0;
            for (std::size_t h = 0; h < heads.size(); ++h) {
                for (std::size_t k = 0; k < heads[h].prompts.size(); ++k) {
                    const SyntheticPrompt& p = heads[h].prompts[k];
                    const ContextStore& store = stores[h][k];
                    CentroidRouter router(store.partition, true);
                    SparseAttnConfig sc;
                    sc.probes = l;
                    sc.block_size = cfg.block_size;
                    sc.dense = cfg.dense;
                    for (std::size_t q = 0; q < p.n_queries(); ++q) {
                        TensorBlock qr = row_block(p.queries_roped, q);
                        TensorBlock qd = row_block(p.queries_deroped, q);
                        AttnResult r = sparse_attention(qr, qd, store, router, sc);
                        sel_sum += selectivity(r, store.n_keys());
                        max_visited = std::max(max_visited, r.max_visited_bucket);
                        std::vector<std::uint32_t> picked = router.select(qr, qd, l);
                        cov_sum += attention_mass_coverage(qr, store, picked, cfg.dense);
                        n_terms++;
                    }
                }
            }
            t.add_row({std::to_string(C), std::to_string(l),
                       fmt_g(sel_sum / static_cast<double>(n_terms)),
                       fmt_g(cov_sum / static_cast<double>(n_terms)),
                       std::to_string(max_visited)});
        }
    }
    return t;
}

CsvTable run_assignment_comparison(const ExperimentConfig& cfg,
                                   const std::vector<HeadData>& heads,
                                   const std::vector<TrainedHead>& artifacts) {
    cfg.validate();
    if (heads.size() != artifacts.size()) {
        throw std::invalid_argument(
                "run_assignment_comparison: heads and artifacts differ in length");
    }
    for (const TrainedHead& a : artifacts) {
        if (!a.has_qmodel) {
            throw std::invalid_argument(
                    "run_assignment_comparison: every head needs a trained query model");
        }
    }
    auto ctx = build_contexts(cfg, heads, artifacts, false);

    CsvTable t;
    t.name = "assignment_comparison";
    t.columns = {"assigner", "l", "coverage"};
    const char* names[] = {"centroid_deroped", "centroid_roped", "qmodel"};
    for (int a = 0; a < 3; ++a) {
        for (std::size_t l : cfg.probes) {
            double cov_sum = 0.0;
            std::size_t n_terms = 0;
            for (std::size_t h = 0; h < heads.size(); ++h) {
                std::unique_ptr<BucketRouter> router;
                if (a == 0) {
                    router = std::make_unique<CentroidRouter>(artifacts[h].partition, true);
                } else if (a == 1) {
                    router = std::make_unique<CentroidRouter>(artifacts[h].partition, false);
                } else {
                    router = std::make_unique<QModelRouter>(artifacts[h].qmodel);
                }
                for (PromptCtx& c : ctx[h]) {
                    const SyntheticPrompt& p = *c.prompt;
                    for (std::size_t q = 0; q < p.n_queries(); ++q) {
                        TensorBlock qr = row_block(p.queries_roped, q);
                        TensorBlock qd = row_block(p.queries_deroped, q);
                        std::vector<std::uint32_t> picked = router->select(qr, qd, l);
                        cov_sum += attention_mass_coverage(qr, c.store, picked, cfg.dense);
                        n_terms++;
                    }
                }
            }
            t.add_row({names[a], std::to_string(l),
                       fmt_g(cov_sum / static_cast<double>(n_terms))});
        }
    }
    return t;
}

std::string DiagnosticsReport::to_string() const {
    return span.to_string() + "\n" + balance.to_string() + "\n" + overlap.to_string();
}

DiagnosticsReport run_diagnostics(const ExperimentConfig& cfg, const std::vector<HeadData>& heads,
                                  const std::vector<TrainedHead>& artifacts) {
    cfg.validate();
    if (heads.size() != artifacts.size()) {
        throw std::invalid_argument("run_diagnostics: heads and artifacts differ in length");
    }
    auto ctx = build_contexts(cfg, heads, artifacts, false);
    constexpr std::size_t kSampleSets = 8;
    constexpr std::size_t kTopK = 256;

    DiagnosticsReport rep;
    rep.span.name = "span_fraction";
    rep.span.columns = {"head", "top_k", "fraction"};
    rep.balance.name = "bucket_balance";
    rep.balance.columns = {"head", "regime", "deviation"};
    rep.overlap.name = "assignment_overlap";
    rep.overlap.columns = {"head", "assigner", "tv_distance"};

    Rng sample_rng(cfg.eval_seed);
    for (std::size_t h = 0; h < heads.size(); ++h) {
        const std::string head = std::to_string(heads[h].spec.seed);
        double span_sum = 0.0;
        double dev_uniform = 0.0;
        double dev_temporal = 0.0;
        double tv_deroped = 0.0;
        double tv_roped = 0.0;
        for (std::size_t k = 0; k < heads[h].prompts.size(); ++k) {
            const SyntheticPrompt& p = heads[h].prompts[k];
            const ContextStore& store = ctx[h][k].store;
            span_sum += attention_span_fraction(p.queries_roped, store, cfg.dense, kTopK);

            // balance regimes over the de-roped non-sink keys
            const std::size_t n_s = p.n_keys() - cfg.dense.sink_count;
            const std::size_t set_size = n_s / kSampleSets;
            if (set_size < 1) {
                throw std::invalid_argument("run_diagnostics: context too short for balance sets");
            }
            std::vector<std::size_t> perm(n_s);
            std::iota(perm.begin(), perm.end(), cfg.dense.sink_count);
            sample_rng.shuffle(perm);
            std::vector<TensorBlock> uniform_sets;
            std::vector<TensorBlock> temporal_sets;
            for (std::size_t s = 0; s < kSampleSets; ++s) {
                uniform_sets.push_back(gather_rows(
                        p.keys_deroped,
                        std::span<const std::size_t>(perm.data() + s * set_size, set_size)));
                temporal_sets.push_back(slice_rows(p.keys_deroped,
                                                   cfg.dense.sink_count + s * set_size,
                                                   cfg.dense.sink_count + (s + 1) * set_size));
            }
            const Partition& part = store.partition;
            std::vector<double> du = bucket_balance_deviation(part, uniform_sets);
            std::vector<double> dt = bucket_balance_deviation(part, temporal_sets);
            dev_uniform += std::accumulate(du.begin(), du.end(), 0.0) / du.size();
            dev_temporal += std::accumulate(dt.begin(), dt.end(), 0.0) / dt.size();

            // key vs query bucket frequencies
            const std::size_t C = store.n_buckets();
            std::vector<double> fk(C, 0.0), fq_d(C, 0.0), fq_r(C, 0.0);
            for (std::uint32_t b : store.assignment.bucket_of) {
                fk[b] += 1.0 / static_cast<double>(store.assignment.size());
            }
            for (std::size_t q = 0; q < p.n_queries(); ++q) {
                const double w = 1.0 / static_cast<double>(p.n_queries());
                fq_d[assign_key(std::span<const float>(p.queries_deroped.row(q), p.queries_deroped.dim),
                                part)] += w;
                fq_r[assign_key(std::span<const float>(p.queries_roped.row(q), p.queries_roped.dim),
                                part)] += w;
            }
            double td = 0.0, tr = 0.0;
            for (std::size_t c = 0; c < C; ++c) {
                td += std::abs(fk[c] - fq_d[c]);
                tr += std::abs(fk[c] - fq_r[c]);
            }
            tv_deroped += 0.5 * td;
            tv_roped += 0.5 * tr;
        }
        const double inv = 1.0 / static_cast<double>(heads[h].prompts.size());
        rep.span.add_row({head, std::to_string(kTopK), fmt_g(span_sum * inv)});
        rep.balance.add_row({head, "uniform", fmt_g(dev_uniform * inv)});
        rep.balance.add_row({head, "temporal", fmt_g(dev_temporal * inv)});
        rep.overlap.add_row({head, "centroid_deroped", fmt_g(tv_deroped * inv)});
        rep.overlap.add_row({head, "centroid_roped", fmt_g(tv_roped * inv)});
    }
    return rep;
}

} // namespace saap
