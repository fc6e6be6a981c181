#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "saap/tensor.hpp"

namespace saap {

/// One hyperplane hash table: bit i of a code is set iff <x, proj_i> > 0
/// (ties hash to 0).
struct HyperplaneTable {
    TensorBlock projections;              // bits x d, unit rows
    std::vector<std::uint64_t> key_codes; // code per indexed key

    std::size_t bits() const { return projections.rows; }
    std::size_t n_keys() const { return key_codes.size(); }
};

std::uint64_t hyperplane_code(std::span<const float> x, const TensorBlock& projections);
std::uint64_t hyperplane_code(std::span<const float> x, const HyperplaneTable& table);

HyperplaneTable build_hyperplane_table(const TensorBlock& keys, std::size_t bits, Rng& rng);

/// MagicPig-style candidate generation: a key qualifies when its code equals
/// the query's in at least `threshold` of the tables.
struct LshEnsemble {
    std::vector<HyperplaneTable> tables;
    std::size_t threshold = 2;
    std::vector<std::vector<std::uint32_t>> ids_by_code; // per table, ids sorted by code

    std::size_t n_keys() const { return tables.empty() ? 0 : tables.front().n_keys(); }
};

LshEnsemble build_lsh_ensemble(const TensorBlock& keys, std::size_t n_tables, std::size_t bits,
                               std::size_t threshold, Rng& rng);

/// Ascending key ids colliding with q in >= threshold tables.
std::vector<std::uint64_t> magicpig_candidates(std::span<const float> q,
                                               const LshEnsemble& ensemble);

/// Reflected Gray code and its inverse: gray_rank(gray_code(b)) == b.
std::uint64_t gray_code(std::uint64_t b);
std::uint64_t gray_rank(std::uint64_t code);

/// Keys ordered by the Gray rank of their hyperplane codes and cut into
/// equal bins; a query visits the single bin its own rank falls in.
struct KdeformerIndex {
    HyperplaneTable table;
    std::vector<std::uint64_t> order;        // key ids sorted by (gray rank, id)
    std::vector<std::uint64_t> sorted_ranks; // gray rank per sorted position
    std::size_t bin_size = 0;
};

KdeformerIndex build_kdeformer(const TensorBlock& keys, std::size_t bits, std::size_t bin_count,
                               Rng& rng);

std::vector<std::uint64_t> kdeformer_select(std::span<const float> q,
                                            const KdeformerIndex& index);

/// Reformer-style bucketing: bucket(x) = argmax_i <x, dir_i>, ties toward
/// the smaller i.
struct ArgmaxBuckets {
    TensorBlock directions; // n_buckets x d, unit rows
};

std::uint32_t argmax_bucket(std::span<const float> x, const ArgmaxBuckets& buckets);

/// Per round, keys sorted by bucket id and chunked; a query visits every
/// chunk overlapping its bucket's segment (the chunk at the insertion point
/// when the segment is empty). Selection = union over rounds.
struct ReformerIndex {
    std::vector<ArgmaxBuckets> rounds;
    std::vector<std::vector<std::uint64_t>> order;          // ids sorted by (bucket, id)
    std::vector<std::vector<std::uint32_t>> sorted_buckets; // bucket per sorted position
    std::size_t chunk_size = 0;
};

ReformerIndex build_reformer(const TensorBlock& keys, std::size_t n_buckets,
                             std::size_t chunk_size, std::size_t rounds, Rng& rng);

std::vector<std::uint64_t> reformer_select(std::span<const float> q, const ReformerIndex& index);

/// Uniform m-subset of [0, n) without replacement, ascending.
std::vector<std::uint64_t> random_sample_select(std::size_t n, std::size_t m, Rng& rng);

} // namespace saap
