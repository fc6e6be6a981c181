#include "saap/attention.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

namespace saap {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void check_kv(const TensorBlock& keys, const TensorBlock& values) {
    if (keys.rows != values.rows) {
        throw std::invalid_argument("attention: " + std::to_string(keys.rows) + " keys vs " +
                                    std::to_string(values.rows) + " values");
    }
}

void check_acc(const PartialAccumulator& acc, const TensorBlock& q_group,
               const TensorBlock& values) {
    if (acc.heads() != q_group.rows || acc.out_acc.cols != values.dim) {
        throw std::invalid_argument("pattn_absorb: accumulator " +
                                    shape_str(acc.heads(), acc.out_acc.cols) +
                                    " does not fit group " +
                                    shape_str(q_group.rows, values.dim));
    }
}

/// Shared absorb body; `fetch(j)` maps block-local slot j to a key row id.
template <typename Fetch>
void absorb_impl(PartialAccumulator& acc, const TensorBlock& q_group, const TensorBlock& keys,
                 const TensorBlock& values, std::size_t count, Fetch fetch) {
    check_kv(keys, values);
    check_acc(acc, q_group, values);
    if (q_group.dim != keys.dim) {
        throw std::invalid_argument("pattn_absorb: query dim " + std::to_string(q_group.dim) +
                                    " vs key dim " + std::to_string(keys.dim));
    }
    if (count == 0) {
        return;
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(q_group.dim));
    std::vector<double> s(count);
    for (std::size_t h = 0; h < q_group.rows; ++h) {
        const float* q = q_group.row(h);
        double rowmax = kNegInf;
        for (std::size_t j = 0; j < count; ++j) {
            std::size_t id = fetch(j);
            if (id >= keys.rows) {
                throw std::invalid_argument("pattn_absorb: key id " + std::to_string(id) +
                                            " out of range");
            }
            s[j] = dot_f(q, keys.row(id), keys.dim) * scale;
            rowmax = std::max(rowmax, s[j]);
        }
        const double m_new = std::max(acc.runmax[h], rowmax);
        const double rescale = std::exp(acc.runmax[h] - m_new); // 0 for a fresh head
        double* out = acc.out_acc.row(h);
        for (std::size_t j = 0; j < values.dim; ++j) {
            out[j] *= rescale;
        }
        acc.sumexp[h] *= rescale;
        for (std::size_t j = 0; j < count; ++j) {
            const double w = std::exp(s[j] - m_new);
            const float* v = values.row(fetch(j));
            for (std::size_t t = 0; t < values.dim; ++t) {
                out[t] += w * static_cast<double>(v[t]);
            }
            acc.sumexp[h] += w;
        }
        acc.runmax[h] = m_new;
    }
}

} // namespace

PartialAccumulator::PartialAccumulator(std::size_t heads, std::size_t value_dim)
        : out_acc(heads, value_dim), sumexp(heads, 0.0), runmax(heads, kNegInf) {}

void pattn_absorb(PartialAccumulator& acc, const TensorBlock& q_group, const TensorBlock& keys,
                  const TensorBlock& values, std::span<const std::uint64_t> ids) {
    absorb_impl(acc, q_group, keys, values, ids.size(),
                [&](std::size_t j) { return static_cast<std::size_t>(ids[j]); });
}

void pattn_absorb_range(PartialAccumulator& acc, const TensorBlock& q_group,
                        const TensorBlock& keys, const TensorBlock& values, std::size_t begin,
                        std::size_t end) {
    if (end > keys.rows || begin > end) {
        throw std::invalid_argument("pattn_absorb_range: bad range [" + std::to_string(begin) +
                                    ", " + std::to_string(end) + ")");
    }
    absorb_impl(acc, q_group, keys, values, end - begin,
                [&](std::size_t j) { return begin + j; });
}

void merge_into(PartialAccumulator& acc, const PartialAccumulator& part) {
    if (acc.heads() != part.heads() || acc.out_acc.cols != part.out_acc.cols) {
        throw std::invalid_argument("merge_into: accumulator shapes differ");
    }
    for (std::size_t h = 0; h < acc.heads(); ++h) {
        if (part.sumexp[h] == 0.0) {
            continue;
        }
        if (acc.sumexp[h] == 0.0) {
            std::copy(part.out_acc.row(h), part.out_acc.row(h) + part.out_acc.cols,
                      acc.out_acc.row(h));
            acc.sumexp[h] = part.sumexp[h];
            acc.runmax[h] = part.runmax[h];
            continue;
        }
        const double m = std::max(acc.runmax[h], part.runmax[h]);
        const double a_acc = std::exp(acc.runmax[h] - m);
        const double a_part = std::exp(part.runmax[h] - m);
        double* dst = acc.out_acc.row(h);
        const double* src = part.out_acc.row(h);
        for (std::size_t j = 0; j < acc.out_acc.cols; ++j) {
            dst[j] = dst[j] * a_acc + src[j] * a_part;
        }
        acc.sumexp[h] = acc.sumexp[h] * a_acc + part.sumexp[h] * a_part;
        acc.runmax[h] = m;
    }
}

PartialAccumulator merge_partials(std::span<const PartialAccumulator> parts) {
    if (parts.empty()) {
        throw std::invalid_argument("merge_partials: empty list");
    }
    PartialAccumulator acc = parts.front();
    for (std::size_t i = 1; i < parts.size(); ++i) {
        merge_into(acc, parts[i]);
    }
    return acc;
}

TensorBlock pattn_finalize(const PartialAccumulator& acc, bool* any_empty) {
    TensorBlock out(acc.heads(), acc.out_acc.cols);
    if (any_empty != nullptr) {
        *any_empty = false;
    }
    for (std::size_t h = 0; h < acc.heads(); ++h) {
        if (acc.sumexp[h] == 0.0) {
            if (any_empty != nullptr) {
                *any_empty = true;
            }
            continue; // row stays zero
        }
        const double inv = 1.0 / acc.sumexp[h];
        const double* src = acc.out_acc.row(h);
        float* dst = out.row(h);
        for (std::size_t j = 0; j < out.dim; ++j) {
            dst[j] = static_cast<float>(src[j] * inv);
        }
    }
    return out;
}

TensorBlock full_attention(const TensorBlock& q_group, const TensorBlock& keys,
                           const TensorBlock& values) {
    if (keys.rows == 0) {
        throw std::invalid_argument("full_attention: empty key set");
    }
    check_kv(keys, values);
    const double scale = 1.0 / std::sqrt(static_cast<double>(q_group.dim));
    Mat s = matmul_scaled_d(q_group, keys, scale);
    TensorBlock out(q_group.rows, values.dim);
    std::vector<double> acc(values.dim);
    for (std::size_t h = 0; h < q_group.rows; ++h) {
        double* sr = s.row(h);
        double mx = kNegInf;
        for (std::size_t k = 0; k < keys.rows; ++k) {
            mx = std::max(mx, sr[k]);
        }
        std::fill(acc.begin(), acc.end(), 0.0);
        double denom = 0.0;
        for (std::size_t k = 0; k < keys.rows; ++k) {
            const double w = std::exp(sr[k] - mx);
            denom += w;
            const float* v = values.row(k);
            for (std::size_t j = 0; j < values.dim; ++j) {
                acc[j] += w * static_cast<double>(v[j]);
            }
        }
        float* dst = out.row(h);
        for (std::size_t j = 0; j < values.dim; ++j) {
            dst[j] = static_cast<float>(acc[j] / denom);
        }
    }
    return out;
}

TensorBlock attention_over_ids(const TensorBlock& q_group, const TensorBlock& keys,
                               const TensorBlock& values, std::span<const std::uint64_t> ids,
                               bool* any_empty) {
    PartialAccumulator acc(q_group.rows, values.dim);
    pattn_absorb(acc, q_group, keys, values, ids);
    return pattn_finalize(acc, any_empty);
}

namespace {

TensorBlock derope_indexed(const TensorBlock& keys_roped, const RopeConfig& rope,
                           std::size_t sink_count) {
    if (keys_roped.rows <= sink_count) {
        throw std::invalid_argument("build_context_store: no keys left to index after " +
                                    std::to_string(sink_count) + " sink keys");
    }
    const std::size_t n = keys_roped.rows - sink_count;
    TensorBlock tail(n, keys_roped.dim);
    std::vector<std::uint64_t> positions(n);
    for (std::size_t i = 0; i < n; ++i) {
        const float* src = keys_roped.row(sink_count + i);
        std::copy(src, src + keys_roped.dim, tail.row(i));
        positions[i] = sink_count + i;
    }
    return rope_remove_block(tail, positions, rope);
}

ContextStore finish_store(const TensorBlock& keys_roped, const TensorBlock& values,
                          const TensorBlock& deroped, Partition partition,
                          std::size_t sink_count) {
    ContextStore store;
    store.keys = keys_roped;
    store.values = values;
    store.id_offset = sink_count;
    store.assignment = assign_keys(deroped, partition);
    store.index = build_ivf(store.assignment, partition.n_buckets());
    store.partition = std::move(partition);
    return store;
}

} // namespace

ContextStore build_context_store(const TensorBlock& keys_roped, const TensorBlock& values,
                                 const RopeConfig& rope, std::size_t n_buckets,
                                 std::size_t kmeans_iters, std::size_t sink_count, Rng& rng,
                                 KMeansStats* stats) {
    check_kv(keys_roped, values);
    TensorBlock deroped = derope_indexed(keys_roped, rope, sink_count);
    Partition part = kmeans_train(deroped, n_buckets, kmeans_iters, rng, stats);
    return finish_store(keys_roped, values, deroped, std::move(part), sink_count);
}

ContextStore build_context_store(const TensorBlock& keys_roped, const TensorBlock& values,
                                 const RopeConfig& rope, Partition partition,
                                 std::size_t sink_count) {
    check_kv(keys_roped, values);
    TensorBlock deroped = derope_indexed(keys_roped, rope, sink_count);
    return finish_store(keys_roped, values, deroped, std::move(partition), sink_count);
}

namespace {

std::vector<std::uint32_t> top_l_ids(const std::vector<double>& score, std::size_t l) {
    std::vector<std::uint32_t> ids(score.size());
    std::iota(ids.begin(), ids.end(), 0u);
    std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(l), ids.end(),
                      [&](std::uint32_t a, std::uint32_t b) {
                          if (score[a] != score[b]) {
                              return score[a] > score[b];
                          }
                          return a < b;
                      });
    ids.resize(l);
    return ids;
}

} // namespace

std::vector<std::uint32_t> CentroidRouter::select(const TensorBlock& q_group_roped,
                                                  const TensorBlock& q_group_deroped,
                                                  std::size_t l) const {
    if (l == 0) {
        return {};
    }
    const TensorBlock& q = use_deroped_ ? q_group_deroped : q_group_roped;
    if (q.dim != partition_.dim()) {
        throw std::invalid_argument("CentroidRouter: query dim " + std::to_string(q.dim) +
                                    " vs centroid dim " + std::to_string(partition_.dim()));
    }
    if (l > partition_.n_buckets()) {
        throw std::invalid_argument("CentroidRouter: l exceeds bucket count");
    }
    std::vector<double> pooled(q.dim, 0.0);
    for (std::size_t i = 0; i < q.rows; ++i) {
        const float* r = q.row(i);
        for (std::size_t j = 0; j < q.dim; ++j) {
            pooled[j] += static_cast<double>(r[j]);
        }
    }
    std::vector<double> score(partition_.n_buckets());
    for (std::size_t c = 0; c < partition_.n_buckets(); ++c) {
        const float* cr = partition_.centroids.row(c);
        double s = 0.0;
        for (std::size_t j = 0; j < q.dim; ++j) {
            s += pooled[j] * static_cast<double>(cr[j]);
        }
        score[c] = s;
    }
    return top_l_ids(score, l);
}

std::vector<std::uint32_t> QModelRouter::select(const TensorBlock&,
                                                const TensorBlock& q_group_deroped,
                                                std::size_t l) const {
    if (l == 0) {
        return {};
    }
    return batched_bucket_select(model_, q_group_deroped, l);
}

AttnResult sparse_attention(const TensorBlock& q_group_roped, const TensorBlock& q_group_deroped,
                            const ContextStore& store, const BucketRouter& router,
                            const SparseAttnConfig& cfg) {
    const std::size_t n = store.n_keys();
    if (cfg.probes > store.n_buckets()) {
        throw std::invalid_argument("sparse_attention: probes " + std::to_string(cfg.probes) +
                                    " exceed bucket count " + std::to_string(store.n_buckets()));
    }
    if (cfg.block_size < 1) {
        throw std::invalid_argument("sparse_attention: block_size must be >= 1");
    }
    if (cfg.dense.sink_count != store.id_offset) {
        throw std::invalid_argument("sparse_attention: window sinks " +
                                    std::to_string(cfg.dense.sink_count) +
                                    " keys but the store indexes from id " +
                                    std::to_string(store.id_offset));
    }

    AttnResult res;
    if (n <= cfg.dense.sink_count + cfg.dense.recent_count) {
        res.output = full_attention(q_group_roped, store.keys, store.values);
        res.keys_scored = n;
        return res;
    }

    const std::size_t sink = cfg.dense.sink_count;
    const std::size_t recent_begin = n - cfg.dense.recent_count;

    PartialAccumulator acc(q_group_roped.rows, store.values.dim);
    pattn_absorb_range(acc, q_group_roped, store.keys, store.values, 0, sink);
    pattn_absorb_range(acc, q_group_roped, store.keys, store.values, recent_begin, n);
    res.keys_scored = sink + (n - recent_begin);

    if (cfg.probes > 0) {
        const auto buckets = router.select(q_group_roped, q_group_deroped, cfg.probes);
        std::vector<std::uint64_t> ids;
        ids.reserve(cfg.block_size);
        for (std::uint32_t c : buckets) {
            const auto segment = store.index.bucket(c);
            res.max_visited_bucket = std::max(res.max_visited_bucket, segment.size());
            PartialAccumulator bucket_acc(q_group_roped.rows, store.values.dim);
            for (std::size_t pos = 0; pos < segment.size(); pos += cfg.block_size) {
                const std::size_t stop = std::min(pos + cfg.block_size, segment.size());
                ids.clear();
                for (std::size_t j = pos; j < stop; ++j) {
                    const std::uint64_t gid = segment[j] + store.id_offset;
                    if (gid < recent_begin) { // window ids handled densely
                        ids.push_back(gid);
                    }
                }
                pattn_absorb(bucket_acc, q_group_roped, store.keys, store.values, ids);
                res.keys_scored += ids.size();
            }
            merge_into(acc, bucket_acc);
        }
    }

    res.output = pattn_finalize(acc, &res.empty_attention);
    return res;
}

double selectivity(const AttnResult& result, std::size_t n_keys) {
    if (n_keys == 0) {
        throw std::invalid_argument("selectivity: empty context");
    }
    return static_cast<double>(result.keys_scored) / static_cast<double>(n_keys);
}

double mse(const TensorBlock& approx, const TensorBlock& exact) {
    if (approx.rows != exact.rows || approx.dim != exact.dim) {
        throw std::invalid_argument("mse: shapes " + shape_str(approx.rows, approx.dim) +
                                    " vs " + shape_str(exact.rows, exact.dim));
    }
    if (approx.data.empty()) {
        throw std::invalid_argument("mse: empty inputs");
    }
    double total = 0.0;
    for (std::size_t i = 0; i < approx.data.size(); ++i) {
        const double d = static_cast<double>(approx.data[i]) - static_cast<double>(exact.data[i]);
        total += d * d;
    }
    return total / static_cast<double>(approx.data.size());
}

namespace {

struct NonDenseRange {
    std::size_t lo = 0; // first non-window key id
    std::size_t hi = 0; // one past the last
};

NonDenseRange non_dense_range(const ContextStore& store, const DenseWindow& dense) {
    if (dense.sink_count != store.id_offset) {
        throw std::invalid_argument("coverage: window sinks " +
                                    std::to_string(dense.sink_count) +
                                    " keys but the store indexes from id " +
                                    std::to_string(store.id_offset));
    }
    const std::size_t n = store.n_keys();
    NonDenseRange r;
    r.lo = std::min(dense.sink_count, n);
    r.hi = n > dense.recent_count ? n - dense.recent_count : 0;
    if (r.hi < r.lo) {
        r.hi = r.lo;
    }
    return r;
}

} // namespace

double attention_mass_coverage(const TensorBlock& q_group_roped, const ContextStore& store,
                               std::span<const std::uint32_t> selected_buckets,
                               const DenseWindow& dense) {
    const NonDenseRange r = non_dense_range(store, dense);
    if (r.lo == r.hi) {
        return 1.0; // nothing outside the window
    }
    std::vector<char> picked(store.n_buckets(), 0);
    for (std::uint32_t c : selected_buckets) {
        if (c >= store.n_buckets()) {
            throw std::invalid_argument("coverage: bucket id out of range");
        }
        picked[c] = 1;
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(q_group_roped.dim));
    std::vector<double> s(r.hi - r.lo);
    double total = 0.0;
    for (std::size_t h = 0; h < q_group_roped.rows; ++h) {
        const float* q = q_group_roped.row(h);
        double mx = kNegInf;
        for (std::size_t id = r.lo; id < r.hi; ++id) {
            s[id - r.lo] = dot_f(q, store.keys.row(id), store.keys.dim) * scale;
            mx = std::max(mx, s[id - r.lo]);
        }
        double denom = 0.0, hit = 0.0;
        for (std::size_t id = r.lo; id < r.hi; ++id) {
            const double w = std::exp(s[id - r.lo] - mx);
            denom += w;
            if (picked[store.assignment.bucket_of[id - store.id_offset]]) {
                hit += w;
            }
        }
        total += hit / denom;
    }
    return total / static_cast<double>(q_group_roped.rows);
}

double attention_span_fraction(const TensorBlock& queries_roped, const ContextStore& store,
                               const DenseWindow& dense, std::size_t top_k) {
    if (top_k >= store.n_keys()) {
        throw std::invalid_argument("attention_span_fraction: top_k " + std::to_string(top_k) +
                                    " must be below the key count " +
                                    std::to_string(store.n_keys()));
    }
    if (queries_roped.rows == 0) {
        throw std::invalid_argument("attention_span_fraction: no queries");
    }
    const NonDenseRange r = non_dense_range(store, dense);
    if (r.lo == r.hi) {
        throw std::invalid_argument("attention_span_fraction: window covers every key");
    }
    const std::size_t m = r.hi - r.lo;
    const std::size_t k = std::min(top_k, m);
    const double scale = 1.0 / std::sqrt(static_cast<double>(queries_roped.dim));
    std::vector<double> w(m);
    double total = 0.0;
    for (std::size_t i = 0; i < queries_roped.rows; ++i) {
        const float* q = queries_roped.row(i);
        double mx = kNegInf;
        for (std::size_t id = r.lo; id < r.hi; ++id) {
            w[id - r.lo] = dot_f(q, store.keys.row(id), store.keys.dim) * scale;
            mx = std::max(mx, w[id - r.lo]);
        }
        double denom = 0.0;
        for (double& x : w) {
            x = std::exp(x - mx);
            denom += x;
        }
        std::nth_element(w.begin(), w.begin() + static_cast<std::ptrdiff_t>(k - 1), w.end(),
                         std::greater<double>());
        double top = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            top += w[j];
        }
        total += top / denom;
    }
    return total / static_cast<double>(queries_roped.rows);
}

} // namespace saap
