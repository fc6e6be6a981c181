#include "saap/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

#include "saap/tensor_io.hpp"

namespace saap {

namespace {

constexpr std::uint64_t kStructureStream = 0;
constexpr std::uint64_t kPromptStreamBase = 1;
constexpr std::uint64_t kOodStreamBase = std::uint64_t{1} << 32;

/// Fixed per-head directions, all embedded as full-dim vectors.
struct HeadBasis {
    std::vector<float> m;
    std::vector<std::vector<float>> codes;   // per cluster, stable pairs
    std::vector<std::vector<float>> beacons; // per target, stable pairs
    std::vector<std::vector<float>> centers; // per cluster, fast+mid pairs
    std::vector<float> drift_dir;
    std::vector<float> shift_dir;
    std::size_t mid_lo = 0;    // first mid-pair dim
    std::size_t stable_lo = 0; // first stable-pair dim
};

std::vector<float> unit_in_range(Rng& rng, std::size_t dim, std::size_t lo, std::size_t hi) {
    std::vector<float> v(dim, 0.0f);
    double norm = 0.0;
    while (norm == 0.0) {
        norm = 0.0;
        for (std::size_t j = lo; j < hi; ++j) {
            double x = rng.normal();
            v[j] = static_cast<float>(x);
            norm += x * x;
        }
        norm = std::sqrt(norm);
    }
    for (std::size_t j = lo; j < hi; ++j) {
        v[j] = static_cast<float>(v[j] / norm);
    }
    return v;
}

/// Orthonormal vectors spanning random directions of the index range
/// [lo, hi). Count must not exceed hi - lo.
std::vector<std::vector<float>> orthonormal_set(Rng& rng, std::size_t dim, std::size_t lo,
                                                std::size_t hi, std::size_t count) {
    std::vector<std::vector<double>> basis;
    basis.reserve(count);
    while (basis.size() < count) {
        std::vector<double> v(hi - lo);
        for (double& x : v) {
            x = rng.normal();
        }
        for (const auto& b : basis) {
            double dot = 0.0;
            for (std::size_t j = 0; j < v.size(); ++j) {
                dot += v[j] * b[j];
            }
            for (std::size_t j = 0; j < v.size(); ++j) {
                v[j] -= dot * b[j];
            }
        }
        double norm = 0.0;
        for (double x : v) {
            norm += x * x;
        }
        norm = std::sqrt(norm);
        if (norm < 1e-6) {
            continue; // degenerate draw, retry
        }
        for (double& x : v) {
            x /= norm;
        }
        basis.push_back(std::move(v));
    }
    std::vector<std::vector<float>> out(count, std::vector<float>(dim, 0.0f));
    for (std::size_t i = 0; i < count; ++i) {
        for (std::size_t j = 0; j < hi - lo; ++j) {
            out[i][lo + j] = static_cast<float>(basis[i][j]);
        }
    }
    return out;
}

HeadBasis build_basis(const HeadSpec& spec) {
    Rng rng = Rng(spec.seed).child(kStructureStream);
    HeadBasis b;
    b.stable_lo = spec.dim - 2 * spec.lowfreq_pairs;
    b.mid_lo = spec.dim / 2;

    auto stable = orthonormal_set(rng, spec.dim, b.stable_lo, spec.dim,
                                  1 + spec.n_clusters + spec.n_targets);
    b.m = std::move(stable[0]);
    b.codes.assign(stable.begin() + 1, stable.begin() + 1 + spec.n_clusters);
    b.beacons.assign(stable.begin() + 1 + spec.n_clusters, stable.end());

    b.centers.reserve(spec.n_clusters);
    for (std::size_t z = 0; z < spec.n_clusters; ++z) {
        b.centers.push_back(unit_in_range(rng, spec.dim, 0, b.stable_lo));
    }
    b.drift_dir = unit_in_range(rng, spec.dim, 0, b.stable_lo);
    b.shift_dir = unit_in_range(rng, spec.dim, 0, b.stable_lo);
    return b;
}

void add_scaled(float* row, const std::vector<float>& dir, double scale) {
    for (std::size_t j = 0; j < dir.size(); ++j) {
        row[j] += static_cast<float>(scale * dir[j]);
    }
}

void base_query_row(const HeadSpec& spec, const HeadBasis& basis, Rng& rng, double shift,
                    float* row) {
    const std::size_t y = static_cast<std::size_t>(rng.below(spec.n_clusters));
    add_scaled(row, basis.m, -spec.query_offset);
    add_scaled(row, basis.centers[y], spec.query_pull);
    if (shift != 0.0) {
        add_scaled(row, basis.shift_dir, shift);
    }
    for (std::size_t j = 0; j < spec.dim; ++j) {
        row[j] += static_cast<float>(spec.query_noise * rng.normal());
    }
}

} // namespace

void HeadSpec::validate() const {
    if (dim < 8 || dim % 2 != 0) {
        throw std::invalid_argument("HeadSpec: dim must be even and >= 8");
    }
    if (lowfreq_pairs < 1 || 4 * lowfreq_pairs > dim) {
        throw std::invalid_argument("HeadSpec: lowfreq_pairs must be in [1, dim/4]");
    }
    if (n_clusters < 1) {
        throw std::invalid_argument("HeadSpec: need at least one cluster");
    }
    if (1 + n_clusters + n_targets > 2 * lowfreq_pairs) {
        throw std::invalid_argument(
                "HeadSpec: stable pairs cannot hold " + std::to_string(n_clusters) +
                " cluster codes + " + std::to_string(n_targets) +
                " target beacons; raise lowfreq_pairs or shrink them");
    }
    if (planted_longrange_fraction < 0.0 || planted_longrange_fraction > 1.0) {
        throw std::invalid_argument("HeadSpec: planted_longrange_fraction outside [0,1]");
    }
    if (planted_longrange_fraction > 0.0 && n_targets < 1) {
        throw std::invalid_argument("HeadSpec: planting requires n_targets >= 1");
    }
    if (key_noise < 0 || stable_noise < 0 || query_noise < 0 || key_center_scale < 0 ||
        sink_norm < 0 || drift_rate < 0) {
        throw std::invalid_argument("HeadSpec: scales must be nonnegative");
    }
    if (local_range < 1) {
        throw std::invalid_argument("HeadSpec: local_range must be >= 1");
    }
    if (rope_base <= 1.0) {
        throw std::invalid_argument("HeadSpec: rope_base must exceed 1");
    }
}

SyntheticPrompt generate_prompt(const HeadSpec& spec, std::size_t n_keys, std::size_t n_q,
                                std::uint64_t prompt_seed) {
    spec.validate();
    if (n_q < 1) {
        throw std::invalid_argument("generate_prompt: need at least one query");
    }
    if (n_keys < n_q + spec.local_range + 2) {
        throw std::invalid_argument("generate_prompt: context of " + std::to_string(n_keys) +
                                    " keys cannot host " + std::to_string(n_q) +
                                    " queries with local range " +
                                    std::to_string(spec.local_range));
    }

    const bool plant = spec.planted_longrange_fraction > 0.0;
    std::size_t target_hi = 0; // exclusive upper bound on target positions
    if (plant) {
        const std::size_t guard_hi =
                n_keys > spec.window_guard ? n_keys - spec.window_guard : 0;
        const std::size_t gap_needed = n_q + spec.longrange_threshold;
        const std::size_t gap_hi = n_keys > gap_needed ? n_keys - gap_needed : 0;
        target_hi = std::min(guard_hi, gap_hi);
        if (target_hi < 1 + spec.n_targets) {
            throw std::invalid_argument(
                    "generate_prompt: context too short to plant " +
                    std::to_string(spec.n_targets) + " long-range targets beyond gap " +
                    std::to_string(spec.longrange_threshold));
        }
    }

    const HeadBasis basis = build_basis(spec);
    Rng rng = Rng(spec.seed).child(kPromptStreamBase + prompt_seed);

    SyntheticPrompt p;
    const std::size_t d = spec.dim;

    std::vector<std::uint64_t> target_ids;
    std::vector<std::size_t> target_slot(n_keys, SIZE_MAX);
    if (plant) {
        target_ids = rng.sample_without_replacement(target_hi - 1, spec.n_targets);
        for (std::size_t t = 0; t < target_ids.size(); ++t) {
            target_ids[t] += 1; // never the sink
            target_slot[target_ids[t]] = t;
        }
    }

    // keys
    p.keys_deroped = TensorBlock(n_keys, d);
    p.key_positions.resize(n_keys);
    std::vector<std::uint32_t> cluster_of(n_keys, 0);
    add_scaled(p.keys_deroped.row(0), basis.m, -spec.sink_norm);
    for (std::size_t i = 1; i < n_keys; ++i) {
        p.key_positions[i] = i;
        const std::size_t z = static_cast<std::size_t>(rng.below(spec.n_clusters));
        cluster_of[i] = static_cast<std::uint32_t>(z);
        float* row = p.keys_deroped.row(i);
        add_scaled(row, basis.m, spec.key_offset);
        add_scaled(row, basis.centers[z], spec.key_center_scale);
        add_scaled(row, basis.codes[z], spec.cluster_code_scale);
        if (spec.drift_rate > 0.0) {
            add_scaled(row, basis.drift_dir, spec.drift_rate * static_cast<double>(i));
        }
        for (std::size_t j = 0; j < basis.stable_lo; ++j) {
            row[j] += static_cast<float>(spec.key_noise * rng.normal());
        }
        for (std::size_t j = basis.stable_lo; j < d; ++j) {
            row[j] += static_cast<float>(spec.stable_noise * rng.normal());
        }
        if (target_slot[i] != SIZE_MAX) {
            add_scaled(row, basis.beacons[target_slot[i]], spec.target_beacon);
        }
    }

    p.values = TensorBlock(n_keys, d);
    rng.fill_normal(p.values);

    // queries, one per position at the end of the context
    p.queries_deroped = TensorBlock(n_q, d);
    p.query_positions.resize(n_q);
    p.planted_target.assign(n_q, -1);
    const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
    for (std::size_t qi = 0; qi < n_q; ++qi) {
        const std::size_t pos = n_keys - n_q + qi;
        p.query_positions[qi] = pos;
        float* row = p.queries_deroped.row(qi);
        base_query_row(spec, basis, rng, spec.ood_shift, row);
        if (plant && rng.uniform() < spec.planted_longrange_fraction) {
            const std::size_t t = static_cast<std::size_t>(rng.below(spec.n_targets));
            const std::uint64_t tid = target_ids[t];
            add_scaled(row, basis.codes[cluster_of[tid]], spec.query_boost * inv_sqrt2);
            add_scaled(row, basis.beacons[t], spec.query_boost * inv_sqrt2);
            p.planted_target[qi] = static_cast<std::int64_t>(tid);
        } else {
            const std::size_t gap = 1 + static_cast<std::size_t>(rng.below(spec.local_range));
            const float* target_row = p.keys_deroped.row(pos - gap);
            double norm = 0.0;
            for (std::size_t j = basis.mid_lo; j < basis.stable_lo; ++j) {
                norm += static_cast<double>(target_row[j]) * target_row[j];
            }
            norm = std::sqrt(norm);
            if (norm > 0.0) {
                const double scale = spec.local_boost / norm;
                for (std::size_t j = basis.mid_lo; j < basis.stable_lo; ++j) {
                    row[j] += static_cast<float>(scale * target_row[j]);
                }
            }
        }
    }

    const RopeConfig rope = spec.rope();
    p.keys_roped = rope_apply_block(p.keys_deroped, p.key_positions, rope);
    p.queries_roped = rope_apply_block(p.queries_deroped, p.query_positions, rope);
    return p;
}

TensorBlock generate_ood_queries(const HeadSpec& spec, std::size_t n_q, double shift,
                                 std::uint64_t prompt_seed) {
    spec.validate();
    if (shift < 0.0) {
        throw std::invalid_argument("generate_ood_queries: shift must be >= 0");
    }
    if (n_q < 1) {
        throw std::invalid_argument("generate_ood_queries: need at least one query");
    }
    const HeadBasis basis = build_basis(spec);
    Rng rng = Rng(spec.seed).child(kOodStreamBase + prompt_seed);
    TensorBlock q(n_q, spec.dim);
    for (std::size_t i = 0; i < n_q; ++i) {
        base_query_row(spec, basis, rng, shift, q.row(i));
    }
    return q;
}

namespace {

struct PromptFile {
    const char* name;
    bool is_tensor; // else u64 sequence
};

constexpr PromptFile kPromptFiles[] = {
        {"keys_deroped", true},    {"keys_roped", true},      {"values", true},
        {"queries_deroped", true}, {"queries_roped", true},   {"key_positions", false},
        {"query_positions", false}, {"planted_target", false},
};

std::vector<std::uint64_t> to_u64(const std::vector<std::int64_t>& v) {
    std::vector<std::uint64_t> out(v.size());
    std::memcpy(out.data(), v.data(), v.size() * sizeof(std::uint64_t));
    return out;
}

std::vector<std::int64_t> to_i64(const std::vector<std::uint64_t>& v) {
    std::vector<std::int64_t> out(v.size());
    std::memcpy(out.data(), v.data(), v.size() * sizeof(std::uint64_t));
    return out;
}

} // namespace

void save_prompt(const SyntheticPrompt& prompt, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    const TensorBlock* tensors[] = {&prompt.keys_deroped, &prompt.keys_roped, &prompt.values,
                                    &prompt.queries_deroped, &prompt.queries_roped};
    std::ofstream manifest(dir / "manifest.txt");
    if (!manifest) {
        throw IoError(IoErrorKind::OpenFailed, "cannot write " + (dir / "manifest.txt").string());
    }
    std::size_t ti = 0;
    for (const PromptFile& f : kPromptFiles) {
        const std::filesystem::path path = dir / (std::string(f.name) + ".tensor");
        if (f.is_tensor) {
            const TensorBlock& t = *tensors[ti++];
            tensor_write(t, path);
            manifest << f.name << " tensor " << t.rows << ' ' << t.dim << '\n';
        } else {
            std::vector<std::uint64_t> seq;
            if (std::string(f.name) == "key_positions") {
                seq = prompt.key_positions;
            } else if (std::string(f.name) == "query_positions") {
                seq = prompt.query_positions;
            } else {
                seq = to_u64(prompt.planted_target);
            }
            u64_write(seq, path);
            manifest << f.name << " u64 " << seq.size() << '\n';
        }
    }
    if (!manifest.flush()) {
        throw IoError(IoErrorKind::OpenFailed, "short write to " + (dir / "manifest.txt").string());
    }
}

SyntheticPrompt load_prompt(const std::filesystem::path& dir) {
    std::ifstream manifest(dir / "manifest.txt");
    if (!manifest) {
        throw IoError(IoErrorKind::OpenFailed, "cannot read " + (dir / "manifest.txt").string());
    }
    SyntheticPrompt p;
    TensorBlock* tensors[] = {&p.keys_deroped, &p.keys_roped, &p.values, &p.queries_deroped,
                              &p.queries_roped};
    std::size_t ti = 0;
    std::string line;
    std::size_t slot = 0;
    while (std::getline(manifest, line)) {
        if (line.empty()) {
            continue;
        }
        std::istringstream ls(line);
        std::string name, kind;
        if (!(ls >> name >> kind)) {
            throw IoError(IoErrorKind::BadShape, "malformed prompt manifest line: " + line);
        }
        if (slot >= std::size(kPromptFiles) || name != kPromptFiles[slot].name) {
            throw IoError(IoErrorKind::BadShape, "unexpected prompt entry '" + name + "'");
        }
        const std::filesystem::path path = dir / (name + ".tensor");
        if (kPromptFiles[slot].is_tensor) {
            *tensors[ti++] = tensor_read(path);
        } else {
            std::vector<std::uint64_t> seq = u64_read(path);
            if (name == "key_positions") {
                p.key_positions = std::move(seq);
            } else if (name == "query_positions") {
                p.query_positions = std::move(seq);
            } else {
                p.planted_target = to_i64(seq);
            }
        }
        slot++;
    }
    if (slot != std::size(kPromptFiles)) {
        throw IoError(IoErrorKind::Truncated, "prompt manifest lists " + std::to_string(slot) +
                                                      " of " +
                                                      std::to_string(std::size(kPromptFiles)) +
                                                      " entries");
    }
    if (p.keys_roped.rows != p.key_positions.size() ||
        p.queries_roped.rows != p.query_positions.size() ||
        p.planted_target.size() != p.queries_roped.rows) {
        throw IoError(IoErrorKind::BadShape, "prompt blocks and position tables disagree");
    }
    return p;
}

} // namespace saap
