#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "saap/partition.hpp"
#include "saap/tensor.hpp"

namespace saap {

/// Query-to-bucket classifier: Linear(d,h) -> BatchNorm -> ReLU -> Linear(h,C)
/// -> row softmax. Parameters are kept in double; checkpoints store f32.
struct QModel {
    Mat w1;          // d x h
    Mat b1;          // 1 x h
    Mat bn_gamma;    // 1 x h
    Mat bn_beta;     // 1 x h
    Mat bn_run_mean; // 1 x h
    Mat bn_run_var;  // 1 x h
    Mat w2;          // h x C
    Mat b2;          // 1 x C

    std::size_t dim() const { return w1.rows; }
    std::size_t hidden() const { return w1.cols; }
    std::size_t n_buckets() const { return w2.cols; }
};

QModel qmodel_init(std::size_t dim, std::size_t hidden, std::size_t n_buckets, Rng& rng);

enum class ForwardMode { train, eval };

/// Train mode normalizes with batch statistics (needs >= 2 rows) and folds
/// them into the running stats with keep-fraction bn_momentum. Eval mode uses
/// running stats only, so each output row depends on its input row alone.
TensorBlock qmodel_forward(QModel& model, const TensorBlock& queries_deroped, ForwardMode mode,
                           double bn_momentum = 0.9);

/// Eval-mode forward on a const model.
TensorBlock qmodel_forward(const QModel& model, const TensorBlock& queries_deroped);

/// Per-bucket attention mass: row-softmax(Q Kt / sqrt(d)) summed over the
/// keys of each bucket. Rows are distributions over bucket ids.
Mat attention_target_rows(const TensorBlock& queries_roped, const TensorBlock& keys_roped,
                          const KeyAssignment& assignment, std::size_t n_buckets);
TensorBlock attention_target(const TensorBlock& queries_roped, const TensorBlock& keys_roped,
                             const KeyAssignment& assignment, std::size_t n_buckets);

/// Mean over rows of sum_j t[j] (log t[j] - log p[j]); p floored at 1e-12,
/// 0 log 0 = 0.
double kl_loss(const Mat& pred, const Mat& target);
double kl_loss(const TensorBlock& pred, const TensorBlock& target);

struct TrainerState {
    double lr = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double bn_momentum = 0.9;
    std::uint64_t step = 0;
    std::vector<Mat> m; // Adam moments, aligned with param_refs order
    std::vector<Mat> v;
};

struct TrainBatch {
    TensorBlock queries_deroped;
    TensorBlock queries_roped;
    TensorBlock keys_roped;
    KeyAssignment key_assignment;
    std::vector<std::uint64_t> query_positions;
    std::vector<std::uint64_t> key_positions;
};

struct QGrads {
    Mat w1, b1, bn_gamma, bn_beta, w2, b2;
};

/// Adam-updated parameters in a fixed order (running stats excluded).
std::vector<Mat*> param_refs(QModel& model);
std::vector<Mat*> param_refs(QGrads& grads);

/// Train-mode loss against a precomputed target; fills grads when non-null.
/// Pure: running stats are not touched.
double qmodel_loss_and_grads(const QModel& model, const TensorBlock& queries_deroped,
                             const Mat& target, QGrads* grads);

/// One Adam step against kl_loss(forward(train), target); updates running
/// stats. Returns the pre-step loss. Throws on non-finite loss.
double train_step_on_target(QModel& model, TrainerState& state,
                            const TensorBlock& queries_deroped, const Mat& target);

/// train_step_on_target against attention_target_rows built from the batch.
double train_step(QModel& model, TrainerState& state, const TrainBatch& batch);

/// Row indices whose top-scoring key sits more than `threshold` positions
/// away. Scores may be raw logits or softmax rows; only the argmax matters.
std::vector<std::size_t> sample_long_range(std::span<const std::uint64_t> query_positions,
                                           std::span<const std::uint64_t> key_positions,
                                           const TensorBlock& scores,
                                           std::uint64_t threshold = 1024);

/// Top-l buckets of the summed eval-mode distributions of a query group,
/// score-descending, ties toward the smaller bucket id.
std::vector<std::uint32_t> batched_bucket_select(const QModel& model,
                                                 const TensorBlock& query_group, std::size_t l);

/// Checkpoint directory: manifest.txt ("name rows cols" per line) plus one
/// tensor file per parameter, f32.
void qmodel_save(const QModel& model, const std::filesystem::path& dir);
QModel qmodel_load(const std::filesystem::path& dir);

} // namespace saap
