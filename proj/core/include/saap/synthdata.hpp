#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "saap/rope.hpp"
#include "saap/tensor.hpp"

namespace saap {

/// Generator parameters for one attention head. The head's fixed structure
/// (cluster directions, offsets, beacons) is derived from `seed`; per-prompt
/// content is derived from (seed, prompt_seed).
///
/// Rotary layout (dim/2 pairs, frequency falls with pair index):
///   fast pairs   [0, dim/2)            cluster centers, drift, OOD shift
///   mid pairs    [dim/2, dim-2L)       local-lookup beacons (L = lowfreq_pairs)
///   stable pairs [dim-2L, dim)         key/query cloud offset m, cluster
///                                      codes, long-range target beacons
/// The stable pairs barely rotate across a context at the default base, so
/// the structure placed there survives roping; the fast pairs decohere with
/// position gap, which is what makes de-roping matter.
struct HeadSpec {
    std::size_t dim = 64;
    std::size_t n_clusters = 8;

    double key_offset = 3.0;         // keys sit at +key_offset * m
    double query_offset = 3.0;       // queries at -query_offset * m
    double key_center_scale = 4.0;   // cluster center strength (fast+mid pairs)
    double cluster_code_scale = 1.0; // per-cluster stable-pair code strength
    double key_noise = 1.0;          // fast+mid pair noise
    double stable_noise = 0.05;      // stable pair noise
    double sink_norm = 8.0;          // key 0 = -sink_norm * m
    double drift_rate = 5e-4;        // position drift along a fixed direction

    double query_noise = 0.3;
    double query_pull = 4.0;   // query alignment with a random cluster center
    double query_boost = 140.0; // long-range lookup strength
    double local_boost = 0.0;  // local lookup strength, 0 = plain cluster queries
    double target_beacon = 1.0; // beacon written into long-range target keys
    double ood_shift = 0.0;    // query cloud translation along a fixed direction

    double planted_longrange_fraction = 0.25;
    std::size_t n_targets = 4;          // distinct long-range target keys
    std::size_t local_range = 64;       // local lookups point <= this far back
    std::size_t longrange_threshold = 1024; // planted gaps exceed this
    std::size_t window_guard = 2112;    // targets stay >= this far from the end

    std::size_t lowfreq_pairs = 8;
    double rope_base = 500000.0;
    std::uint64_t seed = 1;

    RopeConfig rope() const { return RopeConfig{dim, rope_base}; }
    void validate() const;
};

/// One generated context. Row id = position; key 0 is the sink. Roped
/// blocks are rope_apply of the de-roped blocks at their positions.
struct SyntheticPrompt {
    TensorBlock keys_deroped;
    TensorBlock keys_roped;
    TensorBlock values;
    TensorBlock queries_deroped;
    TensorBlock queries_roped;
    std::vector<std::uint64_t> key_positions;
    std::vector<std::uint64_t> query_positions;
    std::vector<std::int64_t> planted_target; // long-range target key id, -1 otherwise

    std::size_t n_keys() const { return keys_roped.rows; }
    std::size_t n_queries() const { return queries_roped.rows; }
};

/// Deterministic in (spec, n_keys, n_q, prompt_seed). Every query carries
/// either a long-range lookup (fraction planted_longrange_fraction, pointing
/// at one of the shared target keys) or, when local_boost > 0, a local
/// lookup at gap <= local_range.
SyntheticPrompt generate_prompt(const HeadSpec& spec, std::size_t n_keys, std::size_t n_q,
                                std::uint64_t prompt_seed = 0);

/// De-roped query cloud translated by `shift` along the head's fixed shift
/// direction (overrides spec.ood_shift); no planted lookups.
TensorBlock generate_ood_queries(const HeadSpec& spec, std::size_t n_q, double shift,
                                 std::uint64_t prompt_seed = 0);

/// Prompt directory layout: manifest.txt naming the tensor files plus
/// keys_deroped/keys_roped/values/queries_deroped/queries_roped tensors and
/// key_positions/query_positions/planted_target u64 sequences.
void save_prompt(const SyntheticPrompt& prompt, const std::filesystem::path& dir);
SyntheticPrompt load_prompt(const std::filesystem::path& dir);

} // namespace saap
