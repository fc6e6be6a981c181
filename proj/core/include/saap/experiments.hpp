#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "saap/attention.hpp"
#include "saap/synthdata.hpp"

namespace saap {

/// Key selection strategies the harness can evaluate against exact
/// attention. kmeans routes de-roped queries to trained centroids,
/// kmeans_roped routes roped queries, saap routes through the trained
/// classifier, streaming keeps only the dense window. The rest select key
/// ids directly: hyperplane collision filtering, Gray-code binning,
/// argmax-bucket chunking, uniform sampling.
enum class Method {
    kmeans,
    kmeans_roped,
    saap,
    streaming,
    magicpig,
    kdeformer,
    reformer,
    random,
};

Method method_from_name(const std::string& name);
std::string method_name(Method m);

/// One emitted table. Serialized form starts with the schema row
/// "# saap <name> <version>", then the column header, then data rows.
struct CsvTable {
    std::string name;
    int version = 1;
    std::vector<std::string> columns;
    std::vector<std::vector<std::string>> rows;

    void add_row(std::vector<std::string> row);
    std::string to_string() const;
    void write(const std::filesystem::path& path) const;
};

struct QTrainOptions {
    std::size_t hidden = 1024;
    std::size_t steps = 1200;
    std::size_t batch = 64;
    std::size_t train_prompts = 4;
    std::size_t queries_per_prompt = 512;
    double lr = 1e-3; // training-run default; TrainerState keeps 1e-5
};

/// Every CLI flag maps onto one field here. Sweep lists hold the parameter
/// axis of each method: probes for the partition methods, projection bits
/// for magicpig, bin counts for kdeformer, bucket counts for reformer,
/// sample fractions for random. When a partition method runs alongside
/// random, the random sweep instead matches the measured selectivity of the
/// other methods point for point.
struct ExperimentConfig {
    std::vector<Method> methods{Method::kmeans, Method::random};
    std::size_t n_buckets = 256;
    std::vector<std::size_t> bucket_counts; // probe-sweep C axis; empty = {n_buckets}
    std::vector<std::size_t> probes{4, 8, 16, 32, 64};
    std::vector<double> sample_fractions;
    std::vector<std::size_t> lsh_bits{4, 6, 8};
    std::size_t lsh_tables = 8;
    std::size_t lsh_threshold = 2;
    std::vector<std::size_t> kde_bins{8, 16, 32, 64};
    std::size_t kde_bits = 16;
    std::vector<std::size_t> reformer_buckets{8, 16, 32, 64};
    std::size_t reformer_rounds = 1;
    DenseWindow dense{1, 0};
    std::size_t block_size = 128;
    std::size_t kmeans_iters = 10;
    bool balanced_partition = false; // round-robin buckets instead of k-means
    std::size_t n_keys = 16384;
    std::size_t n_queries = 512;
    std::size_t n_prompts = 1; // evaluation prompts per head
    std::vector<std::uint64_t> head_seeds{1};
    HeadSpec head_template; // seed field overridden per head
    QTrainOptions qtrain;
    std::uint64_t eval_seed = 7; // drives sampling baselines and table builds

    void validate() const;
};

struct HeadData {
    HeadSpec spec;
    std::vector<SyntheticPrompt> prompts;
};

/// Evaluation prompts for every head seed, prompt seeds 0..n_prompts-1.
/// Training draws from a reserved seed range and never sees these.
std::vector<HeadData> make_head_data(const ExperimentConfig& cfg);

/// Per-head artifacts, trained once and reused across that head's prompts
/// so bucket ids stay consistent.
struct TrainedHead {
    HeadSpec spec;
    Partition partition;
    QModel qmodel;
    bool has_qmodel = false;
};

/// Spherical k-means over the de-roped non-sink keys of the head's training
/// prompt. Training prompts are always generated without the OOD query
/// shift; spec.ood_shift only perturbs evaluation queries.
Partition train_head_partition(const HeadSpec& spec, std::size_t n_keys, std::size_t n_buckets,
                               std::size_t kmeans_iters, std::size_t sink_count = 1,
                               KMeansStats* stats = nullptr);

/// Trains the query classifier against per-bucket attention mass. Each
/// training prompt contributes its long-range queries as a pool; every Adam
/// step draws its batch from a single prompt's pool, cycling through the
/// pools.
QModel train_head_qmodel(const HeadSpec& spec, const Partition& partition,
                         const QTrainOptions& opts, std::size_t n_keys,
                         std::size_t sink_count = 1,
                         std::vector<double>* loss_curve = nullptr);

TrainedHead train_head(const HeadSpec& spec, const ExperimentConfig& cfg, bool with_qmodel);

/// Indexes a prompt under the head's trained partition (or a balanced
/// round-robin layout when cfg.balanced_partition is set).
ContextStore make_store(const ExperimentConfig& cfg, const TrainedHead& artifact,
                        const SyntheticPrompt& prompt);

/// Store with artificially uniform bucket occupancy: non-sink key i goes to
/// bucket i mod C under placeholder random unit centroids. Used to calibrate
/// the selectivity-vs-probes relationship independently of clustering
/// quality.
ContextStore build_balanced_store(const TensorBlock& keys_roped, const TensorBlock& values,
                                  std::size_t n_buckets, std::size_t sink_count, Rng& rng);

/// Table "mse_selectivity" (method, param, selectivity, mse), rows sorted by
/// method then selectivity. Selectivity and MSE are averaged over queries
/// and prompts against exact attention.
CsvTable run_mse_selectivity(const ExperimentConfig& cfg, const std::vector<HeadData>& heads,
                             const std::vector<TrainedHead>& artifacts);

/// Table "probe_sweep" (C, l, selectivity, coverage, max_visited_bucket).
/// Partitions are trained (or balanced-built) per C inside the sweep.
CsvTable run_probe_sweep(const ExperimentConfig& cfg, const std::vector<HeadData>& heads);

/// Table "assignment_comparison" (assigner, l, coverage) comparing
/// centroid routing on roped queries, centroid routing on de-roped queries,
/// and the trained classifier at equal probe counts.
CsvTable run_assignment_comparison(const ExperimentConfig& cfg,
                                   const std::vector<HeadData>& heads,
                                   const std::vector<TrainedHead>& artifacts);

struct DiagnosticsReport {
    CsvTable span;    // head, top_k, fraction
    CsvTable balance; // head, regime, deviation
    CsvTable overlap; // head, assigner, tv_distance

    std::string to_string() const;
};

/// Span: mean attention mass of the top-k non-window keys. Balance: bucket
/// population deviation for position-uniform vs consecutive-slab key
/// samples. Overlap: total-variation distance between key and query bucket
/// frequencies under nearest-centroid assignment.
DiagnosticsReport run_diagnostics(const ExperimentConfig& cfg, const std::vector<HeadData>& heads,
                                  const std::vector<TrainedHead>& artifacts);

} // namespace saap
