#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "saap/tensor.hpp"

namespace saap {

/// C unit-norm centroids over the key space. Similarity is the inner
/// product; keys themselves are left unnormalized.
struct Partition {
    TensorBlock centroids; // C x d, every row unit norm within 1e-6

    std::size_t n_buckets() const {
        return centroids.rows;
    }
    std::size_t dim() const {
        return centroids.dim;
    }
};

/// One bucket id per key, in key order.
struct KeyAssignment {
    std::vector<std::uint32_t> bucket_of;

    std::size_t size() const {
        return bucket_of.size();
    }
};

/// Inverted file over a key assignment: idx groups key ids by bucket,
/// off[c]..off[c+1] delimits bucket c. Within a bucket ids are ascending,
/// so bucket scans walk memory forward.
struct IVFIndex {
    std::vector<std::uint64_t> off; // length C+1, off[0]=0, non-decreasing
    std::vector<std::uint64_t> idx; // permutation of [0, N_s)

    std::size_t n_buckets() const {
        return off.empty() ? 0 : off.size() - 1;
    }
    std::span<const std::uint64_t> bucket(std::size_t c) const {
        return {idx.data() + off[c], static_cast<std::size_t>(off[c + 1] - off[c])};
    }
    std::size_t bucket_size(std::size_t c) const {
        return static_cast<std::size_t>(off[c + 1] - off[c]);
    }
};

struct KMeansStats {
    /// Objective sum_i max_c <k_i, c> recomputed after each iteration.
    std::vector<double> objective_per_iter;
    std::size_t zero_vector_keys = 0;
    std::size_t empty_cluster_repairs = 0;
};

/// Spherical k-means: assignment by max inner product, update by normalized
/// member mean, 10 iterations by convention. An empty cluster steals the
/// worst-fitting point of a cluster with >= 2 members and recenters on it,
/// which keeps the objective non-decreasing.
Partition kmeans_train(const TensorBlock& keys, std::size_t n_buckets, std::size_t iters,
                       Rng& rng, KMeansStats* stats = nullptr);

/// argmax_c <key, centroid_c>; ties and the all-zero key go to the smallest
/// bucket id.
std::uint32_t assign_key(std::span<const float> key, const Partition& p);

KeyAssignment assign_keys(const TensorBlock& keys, const Partition& p);

IVFIndex build_ivf(const KeyAssignment& assignment, std::size_t n_buckets);

/// For each sample set: assign every key and report the relative standard
/// deviation of bucket sizes around the uniform size N/C. Requires >= 2
/// sample sets, none empty.
std::vector<double> bucket_balance_deviation(const Partition& p,
                                             const std::vector<TensorBlock>& key_samples);

void partition_save(const Partition& p, const std::filesystem::path& path);
Partition partition_load(const std::filesystem::path& path);

void ivf_save(const IVFIndex& index, const std::filesystem::path& off_path,
              const std::filesystem::path& idx_path);
IVFIndex ivf_load(const std::filesystem::path& off_path, const std::filesystem::path& idx_path);

} // namespace saap
