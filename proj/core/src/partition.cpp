#include "saap/partition.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "saap/tensor_io.hpp"

namespace saap {

namespace {

double norm_f(const float* x, std::size_t n) {
    return std::sqrt(dot_f(x, x, n));
}

/// Normalizes row i of t; returns false (row untouched) for a zero row.
bool normalize_row(TensorBlock& t, std::size_t i) {
    double n = norm_f(t.row(i), t.dim);
    if (n == 0.0) {
        return false;
    }
    float inv = static_cast<float>(1.0 / n);
    float* r = t.row(i);
    for (std::size_t j = 0; j < t.dim; ++j) {
        r[j] *= inv;
    }
    return true;
}

struct BestBucket {
    std::uint32_t id = 0;
    double score = -std::numeric_limits<double>::infinity();
};

BestBucket best_bucket(std::span<const float> key, const TensorBlock& centroids) {
    BestBucket best;
    for (std::size_t c = 0; c < centroids.rows; ++c) {
        double s = dot_f(key.data(), centroids.row(c), centroids.dim);
        if (s > best.score) {
            best.score = s;
            best.id = static_cast<std::uint32_t>(c);
        }
    }
    return best;
}

} // namespace

Partition kmeans_train(const TensorBlock& keys, std::size_t n_buckets, std::size_t iters,
                       Rng& rng, KMeansStats* stats) {
    if (n_buckets < 1) {
        throw std::invalid_argument("kmeans_train: need at least 1 bucket");
    }
    if (keys.rows < n_buckets) {
        throw std::invalid_argument("kmeans_train: " + std::to_string(keys.rows) +
                                    " keys cannot seed " + std::to_string(n_buckets) +
                                    " buckets");
    }
    if (iters < 1) {
        throw std::invalid_argument("kmeans_train: iters must be >= 1");
    }

    const std::size_t n = keys.rows;
    const std::size_t d = keys.dim;
    const std::size_t C = n_buckets;

    KMeansStats local_stats;
    KMeansStats& st = stats ? *stats : local_stats;
    st.objective_per_iter.clear();
    st.zero_vector_keys = 0;
    st.empty_cluster_repairs = 0;

    // Random init: C distinct keys, normalized. Zero keys fall back to a
    // unit basis vector so centroids stay unit-norm.
    Partition part;
    part.centroids = TensorBlock(C, d);
    {
        auto seeds = rng.sample_without_replacement(n, C);
        rng.shuffle(seeds);
        for (std::size_t c = 0; c < C; ++c) {
            const float* src = keys.row(seeds[c]);
            std::copy(src, src + d, part.centroids.row(c));
            if (!normalize_row(part.centroids, c)) {
                part.centroids.at(c, c % d) = 1.0f;
            }
        }
    }

    std::vector<std::uint32_t> assign(n, 0);
    std::vector<double> assign_score(n, 0.0);

    for (std::size_t it = 0; it < iters; ++it) {
        // assignment step
        for (std::size_t i = 0; i < n; ++i) {
            double kn = norm_f(keys.row(i), d);
            if (kn == 0.0) {
                assign[i] = 0;
                assign_score[i] = 0.0;
                if (it == 0) {
                    st.zero_vector_keys++;
                }
                continue;
            }
            BestBucket b = best_bucket(keys.row_span(i), part.centroids);
            assign[i] = b.id;
            assign_score[i] = b.score;
        }

        std::vector<std::size_t> counts(C, 0);
        for (std::size_t i = 0; i < n; ++i) {
            counts[assign[i]]++;
        }

        // Empty-cluster repair: move the member with the lowest similarity
        // to its own centroid out of a cluster that can spare one. The
        // stolen point becomes the empty cluster's centroid after the mean
        // update, so the objective cannot drop.
        for (std::size_t c = 0; c < C; ++c) {
            if (counts[c] != 0) {
                continue;
            }
            std::size_t victim = n;
            double victim_score = std::numeric_limits<double>::infinity();
            for (std::size_t i = 0; i < n; ++i) {
                if (counts[assign[i]] < 2) {
                    continue;
                }
                if (assign_score[i] < victim_score) {
                    victim_score = assign_score[i];
                    victim = i;
                }
            }
            if (victim == n) {
                continue; // fewer distinct points than buckets; leave empty
            }
            counts[assign[victim]]--;
            assign[victim] = static_cast<std::uint32_t>(c);
            assign_score[victim] = norm_f(keys.row(victim), d);
            counts[c] = 1;
            st.empty_cluster_repairs++;
        }

        // update step: normalized member means
        TensorBlock sums(C, d);
        for (std::size_t i = 0; i < n; ++i) {
            float* s = sums.row(assign[i]);
            const float* k = keys.row(i);
            for (std::size_t j = 0; j < d; ++j) {
                s[j] += k[j];
            }
        }
        for (std::size_t c = 0; c < C; ++c) {
            if (counts[c] == 0) {
                continue; // unrepairable empty cluster keeps its centroid
            }
            float* dst = part.centroids.row(c);
            const float* s = sums.row(c);
            std::copy(s, s + d, dst);
            if (!normalize_row(part.centroids, c)) {
                // members cancelled out exactly; keep previous direction
                std::copy(sums.row(c), sums.row(c) + d, dst);
                part.centroids.at(c, c % d) = 1.0f;
                normalize_row(part.centroids, c);
            }
        }

        double objective = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            objective += best_bucket(keys.row_span(i), part.centroids).score;
        }
        st.objective_per_iter.push_back(objective);
    }

    part.centroids.validate("kmeans centroids");
    return part;
}

std::uint32_t assign_key(std::span<const float> key, const Partition& p) {
    if (key.size() != p.dim()) {
        throw std::invalid_argument("assign_key: key dim " + std::to_string(key.size()) +
                                    " does not match centroids " +
                                    shape_str(p.n_buckets(), p.dim()));
    }
    // strict > keeps ties (and the all-zero key) on the smallest bucket id
    return best_bucket(key, p.centroids).id;
}

KeyAssignment assign_keys(const TensorBlock& keys, const Partition& p) {
    KeyAssignment a;
    a.bucket_of.resize(keys.rows);
    for (std::size_t i = 0; i < keys.rows; ++i) {
        a.bucket_of[i] = assign_key(keys.row_span(i), p);
    }
    return a;
}

IVFIndex build_ivf(const KeyAssignment& assignment, std::size_t n_buckets) {
    const std::size_t n = assignment.size();
    IVFIndex index;
    index.off.assign(n_buckets + 1, 0);
    for (std::size_t i = 0; i < n; ++i) {
        std::uint32_t b = assignment.bucket_of[i];
        if (b >= n_buckets) {
            throw std::invalid_argument("build_ivf: bucket id " + std::to_string(b) +
                                        " out of range for " + std::to_string(n_buckets) +
                                        " buckets");
        }
        index.off[b + 1]++;
    }
    for (std::size_t c = 0; c < n_buckets; ++c) {
        index.off[c + 1] += index.off[c];
    }
    index.idx.resize(n);
    std::vector<std::uint64_t> cursor(index.off.begin(), index.off.end() - 1);
    // ascending key order within each bucket falls out of the forward scan
    for (std::size_t i = 0; i < n; ++i) {
        index.idx[cursor[assignment.bucket_of[i]]++] = i;
    }
    return index;
}

std::vector<double> bucket_balance_deviation(const Partition& p,
                                             const std::vector<TensorBlock>& key_samples) {
    if (key_samples.size() < 2) {
        throw std::invalid_argument("bucket_balance_deviation: need >= 2 sample sets");
    }
    std::vector<double> out;
    out.reserve(key_samples.size());
    const std::size_t C = p.n_buckets();
    for (const TensorBlock& sample : key_samples) {
        if (sample.rows == 0) {
            throw std::invalid_argument("bucket_balance_deviation: empty sample set");
        }
        std::vector<std::size_t> counts(C, 0);
        for (std::size_t i = 0; i < sample.rows; ++i) {
            counts[assign_key(sample.row_span(i), p)]++;
        }
        const double uniform = static_cast<double>(sample.rows) / static_cast<double>(C);
        double ss = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
            double dev = static_cast<double>(counts[c]) - uniform;
            ss += dev * dev;
        }
        out.push_back(std::sqrt(ss / static_cast<double>(C)) / uniform);
    }
    return out;
}

void partition_save(const Partition& p, const std::filesystem::path& path) {
    tensor_write(p.centroids, path);
}

Partition partition_load(const std::filesystem::path& path) {
    Partition p;
    p.centroids = tensor_read(path);
    for (std::size_t c = 0; c < p.n_buckets(); ++c) {
        double n = norm_f(p.centroids.row(c), p.dim());
        if (std::abs(n - 1.0) > 1e-5) {
            throw std::invalid_argument("partition_load: centroid " + std::to_string(c) +
                                        " is not unit norm (" + std::to_string(n) + ")");
        }
    }
    return p;
}

void ivf_save(const IVFIndex& index, const std::filesystem::path& off_path,
              const std::filesystem::path& idx_path) {
    u64_write(index.off, off_path);
    u64_write(index.idx, idx_path);
}

IVFIndex ivf_load(const std::filesystem::path& off_path, const std::filesystem::path& idx_path) {
    IVFIndex index;
    index.off = u64_read(off_path);
    index.idx = u64_read(idx_path);
    if (index.off.empty() || index.off.front() != 0 || index.off.back() != index.idx.size() ||
        !std::is_sorted(index.off.begin(), index.off.end())) {
        throw std::invalid_argument("ivf_load: offset table is not a valid prefix sum");
    }
    return index;
}

} // namespace saap
