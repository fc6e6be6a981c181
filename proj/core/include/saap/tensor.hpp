#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace saap {

/// Dense row-major matrix of f32 vectors. This is the universal payload for
/// keys, queries, values and centroids. Instances are treated as immutable
/// once filled; sharing a const TensorBlock across threads is safe.
struct TensorBlock {
    std::size_t rows = 0;
    std::size_t dim = 0;
    std::vector<float> data; // rows * dim, row-major

    TensorBlock() = default;
    TensorBlock(std::size_t rows_, std::size_t dim_)
            : rows(rows_), dim(dim_), data(rows_ * dim_, 0.0f) {}

    static TensorBlock zeros(std::size_t rows, std::size_t dim) {
        return TensorBlock(rows, dim);
    }

    float* row(std::size_t i) {
        return data.data() + i * dim;
    }
    const float* row(std::size_t i) const {
        return data.data() + i * dim;
    }
    std::span<const float> row_span(std::size_t i) const {
        return {data.data() + i * dim, dim};
    }
    float& at(std::size_t i, std::size_t j) {
        return data[i * dim + j];
    }
    float at(std::size_t i, std::size_t j) const {
        return data[i * dim + j];
    }

    bool all_finite() const;
    /// Throws std::invalid_argument if data size disagrees with rows*dim or
    /// any entry is NaN/Inf.
    void validate(const char* what) const;
};

/// Row-major double matrix for internal softmax / accumulation arithmetic.
/// Storage stays f32 (TensorBlock); all reductions run in 64-bit.
struct Mat {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Mat() = default;
    Mat(std::size_t rows_, std::size_t cols_)
            : rows(rows_), cols(cols_), data(rows_ * cols_, 0.0) {}

    double* row(std::size_t i) {
        return data.data() + i * cols;
    }
    const double* row(std::size_t i) const {
        return data.data() + i * cols;
    }
    double& at(std::size_t i, std::size_t j) {
        return data[i * cols + j];
    }
    double at(std::size_t i, std::size_t j) const {
        return data[i * cols + j];
    }

    TensorBlock to_tensor() const;
};

std::string shape_str(std::size_t rows, std::size_t dim);

/// result[i][j] = scale * <a[i], b[j]>  (b is treated as rows of keys, so
/// this is a * b^T * scale). Accumulation in double, storage f32.
/// Throws std::invalid_argument naming both shapes on dim mismatch.
TensorBlock matmul_scaled(const TensorBlock& a, const TensorBlock& b, double scale);

/// Same contract with a double-precision result, used by attention paths.
Mat matmul_scaled_d(const TensorBlock& a, const TensorBlock& b, double scale);

double dot_f(const float* a, const float* b, std::size_t n);

/// Counter-based deterministic generator (splitmix64 stream). The integer
/// stream is bit-reproducible for a given seed; a single Rng is meant to be
/// owned by one thread. Use child() to derive independent streams.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed), state_(seed) {}

    std::uint64_t next_u64();

    /// Uniform in [0, 1), 53-bit resolution.
    double uniform();

    /// Standard normal via Box-Muller (one spare cached).
    double normal();

    /// Uniform integer in [0, n), unbiased (rejection sampling). n >= 1.
    std::uint64_t below(std::uint64_t n);

    /// Independent stream derived from this generator's seed.
    Rng child(std::uint64_t stream) const;

    void fill_normal(TensorBlock& t, double stddev = 1.0);
    void fill_normal(std::span<float> v, double stddev = 1.0);

    /// m distinct ids out of [0, n), uniformly, returned in ascending order.
    std::vector<std::uint64_t> sample_without_replacement(std::uint64_t n, std::uint64_t m);

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    std::uint64_t seed() const {
        return seed_;
    }

private:
    std::uint64_t seed_;
    std::uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

} // namespace saap
