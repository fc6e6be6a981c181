#include "saap/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace saap {

bool TensorBlock::all_finite() const {
    for (float v : data) {
        if (!std::isfinite(v)) {
            return false;
        }
    }
    return true;
}

void TensorBlock::validate(const char* what) const {
    if (data.size() != rows * dim) {
        std::ostringstream os;
        os << what << ": data size " << data.size() << " does not match shape "
           << shape_str(rows, dim);
        throw std::invalid_argument(os.str());
    }
    if (!all_finite()) {
        throw std::invalid_argument(std::string(what) + ": non-finite entry");
    }
}

TensorBlock Mat::to_tensor() const {
    TensorBlock t(rows, cols);
    for (std::size_t i = 0; i < data.size(); ++i) {
        t.data[i] = static_cast<float>(data[i]);
    }
    return t;
}

std::string shape_str(std::size_t rows, std::size_t dim) {
    std::ostringstream os;
    os << rows << "x" << dim;
    return os.str();
}

double dot_f(const float* a, const float* b, std::size_t n) {
    double s = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        s += static_cast<double>(a[k]) * static_cast<double>(b[k]);
    }
    return s;
}

static void check_matmul_dims(const TensorBlock& a, const TensorBlock& b) {
    if (a.dim != b.dim) {
        std::ostringstream os;
        os << "matmul_scaled: dimension mismatch between " << shape_str(a.rows, a.dim)
           << " and " << shape_str(b.rows, b.dim);
        throw std::invalid_argument(os.str());
    }
}

TensorBlock matmul_scaled(const TensorBlock& a, const TensorBlock& b, double scale) {
    check_matmul_dims(a, b);
    TensorBlock out(a.rows, b.rows);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const float* ai = a.row(i);
        float* oi = out.row(i);
        for (std::size_t j = 0; j < b.rows; ++j) {
            oi[j] = static_cast<float>(scale * dot_f(ai, b.row(j), a.dim));
        }
    }
    out.validate("matmul_scaled result");
    return out;
}

Mat matmul_scaled_d(const TensorBlock& a, const TensorBlock& b, double scale) {
    check_matmul_dims(a, b);
    Mat out(a.rows, b.rows);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const float* ai = a.row(i);
        double* oi = out.row(i);
        for (std::size_t j = 0; j < b.rows; ++j) {
            oi[j] = scale * dot_f(ai, b.row(j), a.dim);
        }
    }
    return out;
}

std::uint64_t Rng::next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) {
        u1 = uniform();
    }
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double t = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(t);
    has_spare_ = true;
    return r * std::cos(t);
}

std::uint64_t Rng::below(std::uint64_t n) {
    if (n == 0) {
        throw std::invalid_argument("Rng::below: n must be >= 1");
    }
    // reject the tail so every residue is equally likely
    std::uint64_t threshold = (0 - n) % n;
    for (;;) {
        std::uint64_t r = next_u64();
        if (r >= threshold) {
            return r % n;
        }
    }
}

Rng Rng::child(std::uint64_t stream) const {
    // run the child id through the mixer so nearby streams decorrelate
    Rng mixer(seed_ ^ (0xD1342543DE82EF95ull * (stream + 1)));
    return Rng(mixer.next_u64());
}

void Rng::fill_normal(TensorBlock& t, double stddev) {
    fill_normal(std::span<float>(t.data), stddev);
}

void Rng::fill_normal(std::span<float> v, double stddev) {
    for (float& x : v) {
        x = static_cast<float>(normal() * stddev);
    }
}

std::vector<std::uint64_t> Rng::sample_without_replacement(std::uint64_t n, std::uint64_t m) {
    if (m > n) {
        throw std::invalid_argument("sample_without_replacement: m > n");
    }
    // Floyd's algorithm; result sorted for deterministic downstream order.
    std::vector<std::uint64_t> out;
    out.reserve(m);
    std::vector<bool> taken;
    // bitmap is fine at desk scale and keeps the loop O(1) per draw
    taken.assign(n, false);
    for (std::uint64_t j = n - m; j < n; ++j) {
        std::uint64_t t = below(j + 1);
        if (taken[t]) {
            t = j;
        }
        taken[t] = true;
        out.push_back(t);
    }
    std::sort(out.begin(), out.end());
    return out;
}

} // namespace saap
