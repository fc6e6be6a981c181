#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "saap/partition.hpp"
#include "saap/qmodel.hpp"
#include "saap/rope.hpp"
#include "saap/tensor.hpp"

namespace saap {

/// Keys attended exhaustively regardless of bucket routing: the first
/// sink_count keys plus the recent_count most recent ones.
struct DenseWindow {
    std::size_t sink_count = 1;
    std::size_t recent_count = 2047;
};

struct SparseAttnConfig {
    std::size_t probes = 16;      // buckets visited per query group; 0 = window only
    std::size_t block_size = 128; // bucket scan granularity, no effect on results
    DenseWindow dense;
};

/// Online-softmax state for a group of query heads. runmax is the running
/// row maximum (-inf before anything is absorbed), sumexp the running
/// denominator, out_acc the unnormalized value accumulation.
struct PartialAccumulator {
    Mat out_acc;                // heads x value dim
    std::vector<double> sumexp; // per head, 0 iff nothing absorbed
    std::vector<double> runmax; // per head

    PartialAccumulator() = default;
    PartialAccumulator(std::size_t heads, std::size_t value_dim);

    std::size_t heads() const { return out_acc.rows; }
};

/// Absorbs the listed key/value rows into acc. Scores are <q,k>/sqrt(d);
/// existing state is rescaled by exp(old_max - new_max). An empty id list is
/// a no-op.
void pattn_absorb(PartialAccumulator& acc, const TensorBlock& q_group, const TensorBlock& keys,
                  const TensorBlock& values, std::span<const std::uint64_t> ids);

/// Absorbs the contiguous row range [begin, end).
void pattn_absorb_range(PartialAccumulator& acc, const TensorBlock& q_group,
                        const TensorBlock& keys, const TensorBlock& values, std::size_t begin,
                        std::size_t end);

/// Folds part into acc per head: rescale both sides to the larger running
/// max, add. Merging an empty part is the identity.
void merge_into(PartialAccumulator& acc, const PartialAccumulator& part);

PartialAccumulator merge_partials(std::span<const PartialAccumulator> parts);

/// out = out_acc / sumexp per head. A head with sumexp = 0 yields a zero row
/// and sets *any_empty.
TensorBlock pattn_finalize(const PartialAccumulator& acc, bool* any_empty = nullptr);

/// softmax(q K^T / sqrt(d)) V with max subtraction, all reductions in
/// double.
TensorBlock full_attention(const TensorBlock& q_group, const TensorBlock& keys,
                           const TensorBlock& values);

/// Exact attention restricted to an explicit key id set (one absorb pass).
TensorBlock attention_over_ids(const TensorBlock& q_group, const TensorBlock& keys,
                               const TensorBlock& values, std::span<const std::uint64_t> ids,
                               bool* any_empty = nullptr);

/// Immutable per-context search state. Row id = token position. Keys with
/// id < id_offset (the sink span) are left out of the index and served by
/// the dense path only; assignment/index entries are local ids, global id =
/// local + id_offset.
struct ContextStore {
    TensorBlock keys;   // roped
    TensorBlock values;
    std::size_t id_offset = 0;
    Partition partition;
    KeyAssignment assignment;
    IVFIndex index;

    std::size_t n_keys() const { return keys.rows; }
    std::size_t n_buckets() const { return partition.n_buckets(); }
};

/// Trains a partition on the de-roped non-sink keys (each key unrotated at
/// its own position) and indexes them.
ContextStore build_context_store(const TensorBlock& keys_roped, const TensorBlock& values,
                                 const RopeConfig& rope, std::size_t n_buckets,
                                 std::size_t kmeans_iters, std::size_t sink_count, Rng& rng,
                                 KMeansStats* stats = nullptr);

/// Indexes the context under an already trained partition.
ContextStore build_context_store(const TensorBlock& keys_roped, const TensorBlock& values,
                                 const RopeConfig& rope, Partition partition,
                                 std::size_t sink_count);

/// Picks the probe buckets for a query group. Implementations must break
/// score ties toward the smaller bucket id.
class BucketRouter {
public:
    virtual ~BucketRouter() = default;
    virtual std::vector<std::uint32_t> select(const TensorBlock& q_group_roped,
                                              const TensorBlock& q_group_deroped,
                                              std::size_t l) const = 0;
};

/// Symmetric assignment: top-l centroids by summed inner product over the
/// group, fed either roped or de-roped queries.
class CentroidRouter : public BucketRouter {
public:
    CentroidRouter(Partition partition, bool use_deroped)
            : partition_(std::move(partition)), use_deroped_(use_deroped) {}

    std::vector<std::uint32_t> select(const TensorBlock& q_group_roped,
                                      const TensorBlock& q_group_deroped,
                                      std::size_t l) const override;

private:
    Partition partition_;
    bool use_deroped_;
};

/// Learned assignment: top-l buckets of the summed classifier distribution
/// over the de-roped group.
class QModelRouter : public BucketRouter {
public:
    explicit QModelRouter(QModel model) : model_(std::move(model)) {}

    std::vector<std::uint32_t> select(const TensorBlock& q_group_roped,
                                      const TensorBlock& q_group_deroped,
                                      std::size_t l) const override;

    const QModel& model() const { return model_; }

private:
    QModel model_;
};

struct AttnResult {
    TensorBlock output;                 // heads x value dim
    std::size_t keys_scored = 0;        // unique keys absorbed
    std::size_t max_visited_bucket = 0; // largest visited bucket, raw size
    bool empty_attention = false;       // some head absorbed nothing
};

/// Dense window plus the router's l buckets, each key absorbed exactly once
/// (bucket scans skip ids inside the window by id range). Falls back to full
/// attention when the window already covers the context.
AttnResult sparse_attention(const TensorBlock& q_group_roped, const TensorBlock& q_group_deroped,
                            const ContextStore& store, const BucketRouter& router,
                            const SparseAttnConfig& cfg);

/// keys_scored / n_keys.
double selectivity(const AttnResult& result, std::size_t n_keys);

/// Mean squared entrywise difference.
double mse(const TensorBlock& approx, const TensorBlock& exact);

/// Fraction of softmax weight (taken over non-window keys only) that falls
/// in the selected buckets, averaged over the group rows. 1.0 when no
/// non-window keys exist.
double attention_mass_coverage(const TensorBlock& q_group_roped, const ContextStore& store,
                               std::span<const std::uint32_t> selected_buckets,
                               const DenseWindow& dense);

/// Mean over queries of the softmax weight carried by each query's top_k
/// heaviest non-window keys.
double attention_span_fraction(const TensorBlock& queries_roped, const ContextStore& store,
                               const DenseWindow& dense, std::size_t top_k = 256);

} // namespace saap
