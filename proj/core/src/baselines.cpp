#include "saap/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace saap {

namespace {

void fill_unit_rows(TensorBlock& t, Rng& rng) {
    for (std::size_t i = 0; i < t.rows; ++i) {
        float* r = t.row(i);
        double norm = 0.0;
        do {
            for (std::size_t j = 0; j < t.dim; ++j) {
                r[j] = static_cast<float>(rng.normal());
            }
            norm = std::sqrt(dot_f(r, r, t.dim));
        } while (norm == 0.0);
        for (std::size_t j = 0; j < t.dim; ++j) {
            r[j] = static_cast<float>(r[j] / norm);
        }
    }
}

void check_bits(std::size_t bits) {
    if (bits < 1 || bits > 63) {
        throw std::invalid_argument("hyperplane table: bits must be in [1, 63], got " +
                                    std::to_string(bits));
    }
}

} // namespace

std::uint64_t hyperplane_code(std::span<const float> x, const TensorBlock& projections) {
    if (x.size() != projections.dim) {
        throw std::invalid_argument("hyperplane_code: dim " + std::to_string(x.size()) +
                                    " vs projections " +
                                    shape_str(projections.rows, projections.dim));
    }
    std::uint64_t code = 0;
    for (std::size_t i = 0; i < projections.rows; ++i) {
        if (dot_f(x.data(), projections.row(i), projections.dim) > 0.0) {
            code |= std::uint64_t{1} << i;
        }
    }
    return code;
}

std::uint64_t hyperplane_code(std::span<const float> x, const HyperplaneTable& table) {
    return hyperplane_code(x, table.projections);
}

HyperplaneTable build_hyperplane_table(const TensorBlock& keys, std::size_t bits, Rng& rng) {
    check_bits(bits);
    HyperplaneTable table;
    table.projections = TensorBlock(bits, keys.dim);
    fill_unit_rows(table.projections, rng);
    table.key_codes.resize(keys.rows);
    for (std::size_t i = 0; i < keys.rows; ++i) {
        table.key_codes[i] = hyperplane_code(keys.row_span(i), table.projections);
    }
    return table;
}

LshEnsemble build_lsh_ensemble(const TensorBlock& keys, std::size_t n_tables, std::size_t bits,
                               std::size_t threshold, Rng& rng) {
    if (threshold < 1 || n_tables < threshold) {
        throw std::invalid_argument("lsh ensemble: need tables >= threshold >= 1, got " +
                                    std::to_string(n_tables) + " tables, threshold " +
                                    std::to_string(threshold));
    }
    LshEnsemble e;
    e.threshold = threshold;
    e.tables.reserve(n_tables);
    e.ids_by_code.reserve(n_tables);
    for (std::size_t t = 0; t < n_tables; ++t) {
        e.tables.push_back(build_hyperplane_table(keys, bits, rng));
        const auto& codes = e.tables.back().key_codes;
        std::vector<std::uint32_t> ids(keys.rows);
        std::iota(ids.begin(), ids.end(), 0u);
        std::sort(ids.begin(), ids.end(), [&](std::uint32_t a, std::uint32_t b) {
            if (codes[a] != codes[b]) {
                return codes[a] < codes[b];
            }
            return a < b;
        });
        e.ids_by_code.push_back(std::move(ids));
    }
    return e;
}

std::vector<std::uint64_t> magicpig_candidates(std::span<const float> q,
                                               const LshEnsemble& ensemble) {
    const std::size_t n = ensemble.n_keys();
    std::vector<std::uint16_t> hits(n, 0);
    for (std::size_t t = 0; t < ensemble.tables.size(); ++t) {
        const auto& codes = ensemble.tables[t].key_codes;
        const auto& ids = ensemble.ids_by_code[t];
        const std::uint64_t qc = hyperplane_code(q, ensemble.tables[t]);
        auto lo = std::lower_bound(ids.begin(), ids.end(), qc,
                                   [&](std::uint32_t id, std::uint64_t c) {
                                       return codes[id] < c;
                                   });
        for (; lo != ids.end() && codes[*lo] == qc; ++lo) {
            hits[*lo]++;
        }
    }
    std::vector<std::uint64_t> out;
    for (std::size_t i = 0; i < n; ++i) {
        if (hits[i] >= ensemble.threshold) {
            out.push_back(i);
        }
    }
    return out;
}

std::uint64_t gray_code(std::uint64_t b) {
    return b ^ (b >> 1);
}

std::uint64_t gray_rank(std::uint64_t code) {
    std::uint64_t b = code;
    b ^= b >> 1;
    b ^= b >> 2;
    b ^= b >> 4;
    b ^= b >> 8;
    b ^= b >> 16;
    b ^= b >> 32;
    return b;
}

KdeformerIndex build_kdeformer(const TensorBlock& keys, std::size_t bits, std::size_t bin_count,
                               Rng& rng) {
    if (bin_count < 1) {
        throw std::invalid_argument("kdeformer: bin_count must be >= 1");
    }
    if (keys.rows == 0) {
        throw std::invalid_argument("kdeformer: no keys");
    }
    KdeformerIndex index;
    index.table = build_hyperplane_table(keys, bits, rng);
    index.order.resize(keys.rows);
    std::iota(index.order.begin(), index.order.end(), std::uint64_t{0});
    std::vector<std::uint64_t> rank(keys.rows);
    for (std::size_t i = 0; i < keys.rows; ++i) {
        rank[i] = gray_rank(index.table.key_codes[i]);
    }
    std::sort(index.order.begin(), index.order.end(),
              [&](std::uint64_t a, std::uint64_t b) {
                  if (rank[a] != rank[b]) {
                      return rank[a] < rank[b];
                  }
                  return a < b;
              });
    index.sorted_ranks.resize(keys.rows);
    for (std::size_t i = 0; i < keys.rows; ++i) {
        index.sorted_ranks[i] = rank[index.order[i]];
    }
    index.bin_size = (keys.rows + bin_count - 1) / bin_count;
    return index;
}

std::vector<std::uint64_t> kdeformer_select(std::span<const float> q,
                                            const KdeformerIndex& index) {
    const std::size_t n = index.order.size();
    const std::uint64_t qrank = gray_rank(hyperplane_code(q, index.table));
    std::size_t pos = static_cast<std::size_t>(
            std::lower_bound(index.sorted_ranks.begin(), index.sorted_ranks.end(), qrank) -
            index.sorted_ranks.begin());
    if (pos == n) {
        pos = n - 1; // past every key: last bin
    }
    const std::size_t bin = pos / index.bin_size;
    const std::size_t lo = bin * index.bin_size;
    const std::size_t hi = std::min(lo + index.bin_size, n);
    std::vector<std::uint64_t> out(index.order.begin() + static_cast<std::ptrdiff_t>(lo),
                                   index.order.begin() + static_cast<std::ptrdiff_t>(hi));
    std::sort(out.begin(), out.end());
    return out;
}

std::uint32_t argmax_bucket(std::span<const float> x, const ArgmaxBuckets& buckets) {
    const TensorBlock& dirs = buckets.directions;
    if (x.size() != dirs.dim) {
        throw std::invalid_argument("argmax_bucket: dim mismatch");
    }
    std::uint32_t best = 0;
    double best_score = dot_f(x.data(), dirs.row(0), dirs.dim);
    for (std::size_t i = 1; i < dirs.rows; ++i) {
        double s = dot_f(x.data(), dirs.row(i), dirs.dim);
        if (s > best_score) {
            best_score = s;
            best = static_cast<std::uint32_t>(i);
        }
    }
    return best;
}

ReformerIndex build_reformer(const TensorBlock& keys, std::size_t n_buckets,
                             std::size_t chunk_size, std::size_t rounds, Rng& rng) {
    if (rounds < 1 || n_buckets < 1 || chunk_size < 1) {
        throw std::invalid_argument("reformer: rounds, buckets and chunk_size must be >= 1");
    }
    if (keys.rows == 0) {
        throw std::invalid_argument("reformer: no keys");
    }
    ReformerIndex index;
    index.chunk_size = chunk_size;
    for (std::size_t r = 0; r < rounds; ++r) {
        ArgmaxBuckets b;
        b.directions = TensorBlock(n_buckets, keys.dim);
        fill_unit_rows(b.directions, rng);
        std::vector<std::uint32_t> bucket(keys.rows);
        for (std::size_t i = 0; i < keys.rows; ++i) {
            bucket[i] = argmax_bucket(keys.row_span(i), b);
        }
        std::vector<std::uint64_t> order(keys.rows);
        std::iota(order.begin(), order.end(), std::uint64_t{0});
        std::sort(order.begin(), order.end(), [&](std::uint64_t x, std::uint64_t y) {
            if (bucket[x] != bucket[y]) {
                return bucket[x] < bucket[y];
            }
            return x < y;
        });
        std::vector<std::uint32_t> sorted(keys.rows);
        for (std::size_t i = 0; i < keys.rows; ++i) {
            sorted[i] = bucket[order[i]];
        }
        index.rounds.push_back(std::move(b));
        index.order.push_back(std::move(order));
        index.sorted_buckets.push_back(std::move(sorted));
    }
    return index;
}

std::vector<std::uint64_t> reformer_select(std::span<const float> q, const ReformerIndex& index) {
    std::vector<std::uint64_t> out;
    for (std::size_t r = 0; r < index.rounds.size(); ++r) {
        const auto& sorted = index.sorted_buckets[r];
        const std::size_t n = sorted.size();
        const std::uint32_t qb = argmax_bucket(q, index.rounds[r]);
        auto range = std::equal_range(sorted.begin(), sorted.end(), qb);
        std::size_t seg_lo = static_cast<std::size_t>(range.first - sorted.begin());
        std::size_t seg_hi = static_cast<std::size_t>(range.second - sorted.begin());
        if (seg_lo == seg_hi) { // empty bucket: visit the chunk at the insertion point
            seg_lo = std::min(seg_lo, n - 1);
            seg_hi = seg_lo + 1;
        }
        const std::size_t first_chunk = seg_lo / index.chunk_size;
        const std::size_t last_chunk = (seg_hi - 1) / index.chunk_size;
        const std::size_t lo = first_chunk * index.chunk_size;
        const std::size_t hi = std::min((last_chunk + 1) * index.chunk_size, n);
        out.insert(out.end(), index.order[r].begin() + static_cast<std::ptrdiff_t>(lo),
                   index.order[r].begin() + static_cast<std::ptrdiff_t>(hi));
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

std::vector<std::uint64_t> random_sample_select(std::size_t n, std::size_t m, Rng& rng) {
    if (m > n) {
        throw std::invalid_argument("random_sample_select: m " + std::to_string(m) +
                                    " exceeds n " + std::to_string(n));
    }
    return rng.sample_without_replacement(n, m);
}

} // namespace saap
