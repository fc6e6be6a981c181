// Release gate: nine checks, one PASS/FAIL line each, exit status = number
// of failures. Unlike the unit suite these run at realistic sizes and assert
// the statistical behavior the design rests on, so expect minutes.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "saap/attention.hpp"
#include "saap/baselines.hpp"
#include "saap/experiments.hpp"
#include "saap/partition.hpp"
#include "saap/qmodel.hpp"
#include "saap/rope.hpp"
#include "saap/synthdata.hpp"
#include "saap/tensor.hpp"

using namespace saap;

namespace {

struct Outcome {
    bool ok = false;
    std::string detail;
};

std::string fmt(const char* f, ...) {
    char buf[512];
    va_list ap;
    va_start(ap, f);
    std::vsnprintf(buf, sizeof buf, f, ap);
    va_end(ap);
    return buf;
}

TensorBlock one_row(const TensorBlock& t, std::size_t i) {
    TensorBlock out(1, t.dim);
    std::copy(t.row(i), t.row(i) + t.dim, out.row(0));
    return out;
}

double mean_of(const std::vector<double>& v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

/// One-sample t statistic of the paired differences.
double paired_t(const std::vector<double>& d) {
    const double n = static_cast<double>(d.size());
    const double mean = mean_of(d);
    double var = 0.0;
    for (double x : d) var += (x - mean) * (x - mean);
    var /= n - 1.0;
    if (var <= 0.0) return mean > 0.0 ? 1e9 : (mean < 0.0 ? -1e9 : 0.0);
    return mean / std::sqrt(var / n);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// Mean routed coverage with each query routed on its own.
double mean_coverage(const SyntheticPrompt& prompt, const ContextStore& store,
                     const BucketRouter& router, std::size_t l, const DenseWindow& dense) {
    double total = 0.0;
    for (std::size_t i = 0; i < prompt.n_queries(); ++i) {
        TensorBlock qr = one_row(prompt.queries_roped, i);
        TensorBlock qd = one_row(prompt.queries_deroped, i);
        total += attention_mass_coverage(qr, store, router.select(qr, qd, l), dense);
    }
    return total / static_cast<double>(prompt.n_queries());
}

// 1. Probing every bucket must reproduce exact attention.
Outcome probe_all_buckets_exact() {
    const std::size_t n = 8192, d = 64, g = 4, buckets = 16;
    const RopeConfig rope{d, 500000.0};
    double worst = 0.0;
    for (int t = 0; t < 100; ++t) {
        Rng rng(1000 + t);
        TensorBlock keys = oracles::random_block(rng, n, d);
        TensorBlock values = oracles::random_block(rng, n, d);
        TensorBlock q = oracles::random_block(rng, g, d);
        ContextStore store = build_context_store(keys, values, rope, buckets, 1, 1, rng);
        CentroidRouter router(store.partition, true);
        SparseAttnConfig cfg;
        cfg.probes = buckets;
        cfg.dense = DenseWindow{1, 127};
        AttnResult res = sparse_attention(q, q, store, router, cfg);
        if (res.keys_scored != n) {
            return {false, fmt("instance %d scored %zu of %zu keys with every bucket probed", t,
                               res.keys_scored, n)};
        }
        worst = std::max(worst, oracles::max_rel_diff(res.output, full_attention(q, keys, values)));
    }
    return {worst <= 1e-5,
            fmt("probing all buckets on 100 instances (n=8192 d=64 g=4), worst rel diff %.2e",
                worst)};
}

// 2. Arbitrary split / shuffle / merge of the accumulator must be exact.
Outcome split_merge_matches_oracle() {
    Rng rng(4242);
    double worst = 0.0;
    for (int t = 0; t < 1000; ++t) {
        const std::size_t n = 2 + rng.below(253);
        const std::size_t d = std::size_t{8} << rng.below(3);
        const std::size_t g = 1 + rng.below(4);
        TensorBlock keys = oracles::random_block(rng, n, d);
        TensorBlock values = oracles::random_block(rng, n, d);
        TensorBlock q = oracles::random_block(rng, g, d);

        std::vector<std::uint64_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        rng.shuffle(order);
        std::vector<std::vector<std::uint64_t>> parts(1 + rng.below(8));
        for (std::uint64_t id : order) parts[rng.below(parts.size())].push_back(id);

        std::vector<PartialAccumulator> accs;
        for (const auto& ids : parts) {
            PartialAccumulator acc(g, d);
            pattn_absorb(acc, q, keys, values, ids);
            accs.push_back(std::move(acc));
        }
        TensorBlock out = pattn_finalize(merge_partials(accs));

        std::vector<std::uint64_t> all(n);
        std::iota(all.begin(), all.end(), 0);
        worst = std::max(worst, oracles::max_abs_diff(
                                        out, oracles::naive_attention_ids(q, keys, values, all)));
    }
    return {worst <= 1e-6,
            fmt("1000 random split/merge trials vs the one-pass oracle, worst abs diff %.2e",
                worst)};
}

// 3. Centroid routing must beat selectivity-matched uniform sampling;
//    the code-based selectors must not.
Outcome clustered_routing_beats_sampling() {
    const auto t0 = std::chrono::steady_clock::now();
    ExperimentConfig cfg;
    cfg.methods = {Method::kmeans, Method::kdeformer, Method::reformer, Method::random};
    cfg.head_seeds = {1, 2, 3, 4};
    cfg.n_prompts = 3;
    cfg.n_keys = 8192;
    cfg.n_queries = 128;
    cfg.n_buckets = 64;
    cfg.probes = {2, 4, 8, 12};
    // Coarse code granularities are left out: wide bins trivially absorb the
    // generator's planted high-boost directions, which no real head offers.
    cfg.kde_bins = {16, 32, 64};
    cfg.reformer_buckets = {64, 128, 256};
    cfg.reformer_rounds = 2;
    cfg.dense = DenseWindow{1, 127};
    cfg.validate();

    std::vector<HeadData> heads = make_head_data(cfg);
    std::vector<TrainedHead> artifacts;
    for (const HeadData& h : heads) artifacts.push_back(train_head(h.spec, cfg, false));
    CsvTable table = run_mse_selectivity(cfg, heads, artifacts);

    struct Row {
        std::string method;
        double sel;
        double mse;
    };
    std::vector<Row> rows;
    for (const auto& r : table.rows) rows.push_back({r[0], std::stod(r[2]), std::stod(r[3])});
    // The sampler hits a requested fraction only up to whole-key rounding per
    // prompt, so "matched" means within a few keys of the method's selectivity.
    const double match_tol = 3.0 / static_cast<double>(cfg.n_keys);
    auto matched_random = [&rows, match_tol](double sel) -> const Row* {
        const Row* best = nullptr;
        double bestd = std::numeric_limits<double>::infinity();
        for (const Row& r : rows) {
            if (r.method != "random") continue;
            const double gap = std::abs(r.sel - sel);
            if (gap < bestd) {
                bestd = gap;
                best = &r;
            }
        }
        return bestd <= match_tol ? best : nullptr;
    };

    int km_points = 0, km_wins = 0, hash_points = 0, hash_ok = 0;
    for (const Row& r : rows) {
        if (r.sel < 0.02 || r.sel > 0.2) continue;
        const Row* rnd = matched_random(r.sel);
        if (r.method == "kmeans") {
            ++km_points;
            if (rnd != nullptr && r.mse < rnd->mse) ++km_wins;
        } else if (r.method == "kdeformer" || r.method == "reformer") {
            ++hash_points;
            if (rnd != nullptr && r.mse >= 0.9 * rnd->mse) ++hash_ok;
        }
    }
    const double secs = seconds_since(t0);
    const bool ok = km_points >= 3 && km_wins == km_points && hash_points >= 2 &&
                    hash_ok == hash_points && secs < 600.0;
    return {ok, fmt("4 heads x 3 prompts: k-means mse below matched random at %d/%d points in "
                    "[0.02,0.2]; kdeformer/reformer >= 0.9x random at %d/%d; %.0fs",
                    km_wins, km_points, hash_ok, hash_points, secs)};
}

// 4. With uniformly filled buckets, selectivity must track l/C.
Outcome balanced_selectivity_calibration() {
    ExperimentConfig cfg;
    cfg.balanced_partition = true;
    cfg.n_buckets = 1024;
    cfg.bucket_counts = {1024};
    cfg.probes = {4, 32, 128};
    cfg.n_keys = 131072;
    cfg.n_queries = 256;
    cfg.head_seeds = {11};
    cfg.dense = DenseWindow{1, 63};
    cfg.validate();

    CsvTable table = run_probe_sweep(cfg, make_head_data(cfg));
    if (table.rows.size() != 3) return {false, fmt("expected 3 sweep rows, got %zu", table.rows.size())};
    const double targets[3] = {0.004, 0.031, 0.125};
    double sel[3] = {0, 0, 0};
    bool ok = true;
    for (std::size_t i = 0; i < 3; ++i) {
        sel[i] = std::stod(table.rows[i][2]);
        ok = ok && std::abs(sel[i] - targets[i]) <= 0.2 * targets[i];
    }
    return {ok, fmt("C=1024 balanced, l=4/32/128 -> selectivity %.4f/%.4f/%.4f vs "
                    "0.0040/0.0310/0.1250 (within 20%%)",
                    sel[0], sel[1], sel[2])};
}

// 5. The trained classifier must stay ahead of de-roped centroid routing
//    under a query-cloud shift, and de-roped must stay ahead of roped
//    centroid routing under key drift. Paired one-sided t over 12 prompts.
Outcome routing_shift_robustness() {
    const std::size_t l = 16, n_q = 256;
    const std::uint64_t n_prompts = 12;
    const double t_crit = 1.796; // one-sided 0.05, 11 dof

    // A target key's bucket is decided by its noise, so the classifier can
    // only hedge across its cluster's buckets; 16 probes hold that hedge when
    // the 8 clusters split into 128 buckets.
    ExperimentConfig cfg_a;
    cfg_a.n_buckets = 128;
    cfg_a.n_keys = 8192;
    cfg_a.dense = DenseWindow{1, 0};
    cfg_a.qtrain = QTrainOptions{256, 1200, 64, 12, 512, 1e-3};

    HeadSpec shifted;
    shifted.seed = 21;
    shifted.ood_shift = 25.0;
    cfg_a.head_template = shifted;
    TrainedHead art_a = train_head(shifted, cfg_a, true);
    QModelRouter qrouter(art_a.qmodel);
    CentroidRouter deroped_a(art_a.partition, true);
    std::vector<double> diff_a;
    for (std::uint64_t p = 0; p < n_prompts; ++p) {
        SyntheticPrompt prompt = generate_prompt(shifted, cfg_a.n_keys, n_q, p);
        ContextStore store = make_store(cfg_a, art_a, prompt);
        diff_a.push_back(mean_coverage(prompt, store, qrouter, l, cfg_a.dense) -
                         mean_coverage(prompt, store, deroped_a, l, cfg_a.dense));
    }

    // Past roughly 1e-3 the drift dominates clustering and buckets turn into
    // position bands, where neither routing flavor is meaningful.
    ExperimentConfig cfg_b;
    cfg_b.n_buckets = 256;
    cfg_b.n_keys = 8192;
    cfg_b.dense = DenseWindow{1, 0};
    HeadSpec drifted;
    drifted.seed = 22;
    drifted.drift_rate = 5e-4;
    cfg_b.head_template = drifted;
    TrainedHead art_b = train_head(drifted, cfg_b, false);
    CentroidRouter deroped_b(art_b.partition, true);
    CentroidRouter roped_b(art_b.partition, false);
    std::vector<double> diff_b;
    for (std::uint64_t p = 0; p < n_prompts; ++p) {
        SyntheticPrompt prompt = generate_prompt(drifted, cfg_b.n_keys, n_q, p);
        ContextStore store = make_store(cfg_b, art_b, prompt);
        diff_b.push_back(mean_coverage(prompt, store, deroped_b, l, cfg_b.dense) -
                         mean_coverage(prompt, store, roped_b, l, cfg_b.dense));
    }

    const double ta = paired_t(diff_a), tb = paired_t(diff_b);
    const bool ok = mean_of(diff_a) > 0.0 && ta > t_crit && mean_of(diff_b) > 0.0 && tb > t_crit;
    return {ok, fmt("12 prompts, l=16: classifier - de-roped coverage %+.4f (t=%.2f) under "
                    "query shift; de-roped - roped %+.4f (t=%.2f) under drift",
                    mean_of(diff_a), ta, mean_of(diff_b), tb)};
}

// 6. Analytic gradients vs finite differences, then a fixed-target descent.
Outcome gradients_and_descent() {
    Rng rng(606);
    QModel tiny = qmodel_init(4, 8, 4, rng);
    TensorBlock q = oracles::random_block(rng, 16, 4);
    Mat target(16, 4);
    for (std::size_t i = 0; i < target.rows; ++i) {
        double z = 0.0;
        for (std::size_t j = 0; j < target.cols; ++j) {
            target.at(i, j) = std::exp(rng.normal());
            z += target.at(i, j);
        }
        for (std::size_t j = 0; j < target.cols; ++j) target.at(i, j) /= z;
    }
    const double worst = oracles::grad_check_worst(tiny, q, target);

    QModel model = qmodel_init(16, 32, 16, rng);
    TensorBlock queries = oracles::random_block(rng, 128, 16);
    TensorBlock keys = oracles::random_block(rng, 256, 16);
    Partition part = kmeans_train(keys, 16, 5, rng);
    Mat attn_target = attention_target_rows(queries, keys, assign_keys(keys, part), 16);
    TrainerState state;
    state.lr = 1e-3;
    double first = 0.0, last = 0.0;
    for (int s = 0; s < 2000; ++s) {
        last = train_step_on_target(model, state, queries, attn_target);
        if (s == 0) first = last;
    }
    const bool ok = worst <= 1e-3 && last < 0.8 * first;
    return {ok, fmt("gradient check worst rel %.2e; 2000 Adam steps took the loss %.4f -> %.4f "
                    "(%.2fx)",
                    worst, first, last, last / first)};
}

// 7. K-means keeps its objective non-decreasing and its centroids unit norm.
Outcome kmeans_objective_and_norms() {
    double worst_drop = 0.0, worst_norm = 0.0;
    for (int run = 0; run < 20; ++run) {
        Rng rng(700 + run);
        const bool small = run % 2 == 0;
        TensorBlock keys = oracles::random_block(rng, small ? 512 : 1500, small ? 16 : 24);
        KMeansStats stats;
        Partition p = kmeans_train(keys, small ? 8 : 13, 10, rng, &stats);
        if (stats.objective_per_iter.size() != 10) {
            return {false, fmt("run %d recorded %zu objective values, expected 10", run,
                               stats.objective_per_iter.size())};
        }
        for (std::size_t i = 1; i < stats.objective_per_iter.size(); ++i) {
            worst_drop = std::max(worst_drop, stats.objective_per_iter[i - 1] -
                                                      stats.objective_per_iter[i]);
        }
        for (std::size_t c = 0; c < p.n_buckets(); ++c) {
            double norm = 0.0;
            for (std::size_t k = 0; k < p.dim(); ++k) {
                norm += static_cast<double>(p.centroids.at(c, k)) * p.centroids.at(c, k);
            }
            worst_norm = std::max(worst_norm, std::abs(std::sqrt(norm) - 1.0));
        }
    }
    const bool ok = worst_drop <= 1e-6 && worst_norm <= 1e-6;
    return {ok, fmt("20 runs x 10 iterations: worst objective drop %.2e, worst centroid norm "
                    "error %.2e",
                    worst_drop, worst_norm)};
}

// 8. Index, Gray-code and rotation invariants.
Outcome structure_invariants() {
    Rng rng(808);
    for (int t = 0; t < 1000; ++t) {
        const std::size_t n = 1 + rng.below(2000);
        const std::size_t c = 1 + rng.below(64);
        KeyAssignment a;
        a.bucket_of.resize(n);
        for (auto& b : a.bucket_of) b = static_cast<std::uint32_t>(rng.below(c));
        IVFIndex ivf = build_ivf(a, c);
        if (ivf.off.size() != c + 1 || ivf.off.front() != 0 || ivf.off.back() != n) {
            return {false, fmt("ivf trial %d: bad offset frame", t)};
        }
        std::vector<std::uint64_t> seen = ivf.idx;
        std::sort(seen.begin(), seen.end());
        for (std::size_t i = 0; i < seen.size(); ++i) {
            if (seen[i] != i) return {false, fmt("ivf trial %d: idx is not a permutation", t)};
        }
        for (std::size_t b = 0; b < c; ++b) {
            if (ivf.off[b] > ivf.off[b + 1]) return {false, fmt("ivf trial %d: offsets decrease", t)};
            auto bucket = ivf.bucket(b);
            for (std::size_t i = 0; i < bucket.size(); ++i) {
                if (a.bucket_of[bucket[i]] != b || (i > 0 && bucket[i - 1] >= bucket[i])) {
                    return {false, fmt("ivf trial %d: bucket %zu malformed", t, b)};
                }
            }
        }
    }

    for (std::uint64_t v = 0; v < 65536; ++v) {
        if (gray_rank(gray_code(v)) != v) return {false, fmt("gray rank mismatch at %llu",
                                                             static_cast<unsigned long long>(v))};
        if (v + 1 < 65536 && std::popcount(gray_code(v) ^ gray_code(v + 1)) != 1) {
            return {false, fmt("gray codes %llu and +1 differ in more than one bit",
                               static_cast<unsigned long long>(v))};
        }
    }

    double worst = 0.0;
    for (int t = 0; t < 10000; ++t) {
        const std::size_t d = std::size_t{8} << rng.below(4);
        const RopeConfig rc{d, 500000.0};
        std::vector<float> x(d);
        rng.fill_normal(std::span<float>(x));
        std::vector<float> y = x;
        const std::uint64_t pos = rng.below(std::uint64_t{1} << 20);
        rope_apply(std::span<float>(y), pos, rc);
        rope_remove(std::span<float>(y), pos, rc);
        for (std::size_t k = 0; k < d; ++k) {
            worst = std::max(worst, std::abs(static_cast<double>(x[k]) - y[k]));
        }
    }
    return {worst <= 1e-6, fmt("1000 random indexes, exhaustive 16-bit gray adjacency, 10000 "
                               "rotation round trips (worst abs %.2e)",
                               worst)};
}

// 9. A window-only run must equal the window oracle, and on planted
//    long-range queries it must capture almost nothing while 32 routed
//    buckets capture almost everything.
Outcome window_only_vs_routed() {
    // 32 probes must be able to cover a whole cluster's buckets (128/8 = 16),
    // since a fresh target key can land in any of them.
    ExperimentConfig cfg;
    cfg.n_buckets = 128;
    cfg.n_keys = 16384;
    cfg.dense = DenseWindow{1, 2047};
    cfg.qtrain = QTrainOptions{256, 1500, 64, 12, 512, 1e-3};
    HeadSpec spec;
    spec.seed = 31;
    cfg.head_template = spec;

    TrainedHead art = train_head(spec, cfg, true);
    QModelRouter router(art.qmodel);

    double worst_stream = 0.0;
    std::vector<double> window_mass, routed_mass;
    for (std::uint64_t p = 0; p < 3; ++p) {
        SyntheticPrompt prompt = generate_prompt(spec, cfg.n_keys, 512, p);
        ContextStore store = make_store(cfg, art, prompt);
        const std::size_t n = prompt.n_keys();
        const std::size_t recent_begin = n - cfg.dense.recent_count;

        SparseAttnConfig scfg;
        scfg.probes = 0;
        scfg.dense = cfg.dense;
        AttnResult res =
                sparse_attention(prompt.queries_roped, prompt.queries_deroped, store, router, scfg);
        std::vector<std::uint64_t> window{0};
        for (std::size_t i = recent_begin; i < n; ++i) window.push_back(i);
        TensorBlock oracle = oracles::naive_attention_ids(prompt.queries_roped, prompt.keys_roped,
                                                          prompt.values, window);
        worst_stream = std::max(worst_stream, oracles::max_abs_diff(res.output, oracle));

        const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(prompt.queries_roped.dim));
        for (std::size_t qi = 0; qi < prompt.n_queries(); ++qi) {
            if (prompt.planted_target[qi] < 0) continue;
            std::vector<double> s(n);
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < n; ++j) {
                double acc = 0.0;
                for (std::size_t k = 0; k < prompt.queries_roped.dim; ++k) {
                    acc += static_cast<double>(prompt.queries_roped.at(qi, k)) *
                           static_cast<double>(prompt.keys_roped.at(j, k));
                }
                s[j] = acc * inv_sqrt_d;
                mx = std::max(mx, s[j]);
            }
            double z = 0.0;
            for (double& v : s) {
                v = std::exp(v - mx);
                z += v;
            }
            std::vector<char> picked(n, 0);
            picked[0] = 1;
            for (std::size_t i = recent_begin; i < n; ++i) picked[i] = 1;
            double wmass = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                if (picked[j] != 0) wmass += s[j] / z;
            }
            window_mass.push_back(wmass);

            TensorBlock qr = one_row(prompt.queries_roped, qi);
            TensorBlock qd = one_row(prompt.queries_deroped, qi);
            for (std::uint32_t c : router.select(qr, qd, 32)) {
                for (std::uint64_t local : store.index.bucket(c)) {
                    picked[local + store.id_offset] = 1;
                }
            }
            double smass = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                if (picked[j] != 0) smass += s[j] / z;
            }
            routed_mass.push_back(smass);
        }
    }
    const double wm = mean_of(window_mass), rm = mean_of(routed_mass);
    const bool ok = worst_stream <= 1e-6 && wm < 0.1 && rm > 0.9;
    return {ok, fmt("window-only output vs window oracle worst abs %.1e; planted-query mass "
                    "%.4f window-only vs %.4f with 32 routed buckets (%zu queries)",
                    worst_stream, wm, rm, window_mass.size())};
}

} // namespace

int main() {
    struct Check {
        int id;
        Outcome (*fn)();
    };
    const Check checks[] = {
            {1, probe_all_buckets_exact},
            {2, split_merge_matches_oracle},
            {3, clustered_routing_beats_sampling},
            {4, balanced_selectivity_calibration},
            {5, routing_shift_robustness},
            {6, gradients_and_descent},
            {7, kmeans_objective_and_norms},
            {8, structure_invariants},
            {9, window_only_vs_routed},
    };
    int failures = 0;
    for (const Check& c : checks) {
        Outcome o;
        try {
            o = c.fn();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        std::printf("%s criterion %d: %s\n", o.ok ? "PASS" : "FAIL", c.id, o.detail.c_str());
        std::fflush(stdout);
        if (!o.ok) ++failures;
    }
    return failures;
}
