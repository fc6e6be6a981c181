#pragma once

// Reference implementations the tests compare against: straightforward
// triple loops and per-row softmax in double precision, written to be
// obviously correct rather than fast.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <unistd.h>
#include <vector>

#include "saap/partition.hpp"
#include "saap/qmodel.hpp"
#include "saap/tensor.hpp"

namespace oracles {

inline saap::TensorBlock random_block(saap::Rng& rng, std::size_t rows, std::size_t dim,
                                      double scale = 1.0) {
    saap::TensorBlock t(rows, dim);
    rng.fill_normal(t, scale);
    return t;
}

inline saap::TensorBlock naive_matmul(const saap::TensorBlock& a, const saap::TensorBlock& b,
                                      double scale) {
    saap::TensorBlock out(a.rows, b.rows);
    for (std::size_t i = 0; i < a.rows; ++i) {
        for (std::size_t j = 0; j < b.rows; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < a.dim; ++k) {
                acc += static_cast<double>(a.at(i, k)) * static_cast<double>(b.at(j, k));
            }
            out.at(i, j) = static_cast<float>(acc * scale);
        }
    }
    return out;
}

/// softmax(q K^T / sqrt(d)) V restricted to `ids`, all in double.
inline saap::TensorBlock naive_attention_ids(const saap::TensorBlock& q,
                                             const saap::TensorBlock& keys,
                                             const saap::TensorBlock& values,
                                             std::span<const std::uint64_t> ids) {
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(q.dim));
    saap::TensorBlock out(q.rows, values.dim);
    for (std::size_t h = 0; h < q.rows; ++h) {
        std::vector<double> s(ids.size());
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < ids.size(); ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < q.dim; ++k) {
                acc += static_cast<double>(q.at(h, k)) *
                       static_cast<double>(keys.at(ids[j], k));
            }
            s[j] = acc * inv_sqrt_d;
            mx = std::max(mx, s[j]);
        }
        double z = 0.0;
        for (double v : s) z += std::exp(v - mx);
        for (std::size_t d = 0; d < values.dim; ++d) {
            double acc = 0.0;
            for (std::size_t j = 0; j < ids.size(); ++j) {
                acc += std::exp(s[j] - mx) / z * static_cast<double>(values.at(ids[j], d));
            }
            out.at(h, d) = static_cast<float>(acc);
        }
    }
    return out;
}

inline saap::TensorBlock naive_attention(const saap::TensorBlock& q, const saap::TensorBlock& keys,
                                         const saap::TensorBlock& values) {
    std::vector<std::uint64_t> ids(keys.rows);
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
    return naive_attention_ids(q, keys, values, ids);
}

/// Row-softmax attention matrix times the dense bucket indicator matrix.
inline saap::Mat naive_attention_target(const saap::TensorBlock& queries,
                                        const saap::TensorBlock& keys,
                                        const saap::KeyAssignment& assignment,
                                        std::size_t n_buckets) {
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(queries.dim));
    saap::Mat out(queries.rows, n_buckets);
    for (std::size_t i = 0; i < queries.rows; ++i) {
        std::vector<double> a(keys.rows);
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < keys.rows; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < queries.dim; ++k) {
                acc += static_cast<double>(queries.at(i, k)) * static_cast<double>(keys.at(j, k));
            }
            a[j] = acc * inv_sqrt_d;
            mx = std::max(mx, a[j]);
        }
        double z = 0.0;
        for (double v : a) z += std::exp(v - mx);
        for (std::size_t j = 0; j < keys.rows; ++j) {
            out.at(i, assignment.bucket_of[j]) += std::exp(a[j] - mx) / z;
        }
    }
    return out;
}

inline double max_abs_diff(const saap::TensorBlock& a, const saap::TensorBlock& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        worst = std::max(worst, std::abs(static_cast<double>(a.data[i]) -
                                         static_cast<double>(b.data[i])));
    }
    return worst;
}

/// Entrywise |a-b| / max(|b|, floor); the floor keeps near-zero entries from
/// dominating what is otherwise a relative comparison.
inline double max_rel_diff(const saap::TensorBlock& a, const saap::TensorBlock& b,
                           double floor = 1e-3) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        double d = std::abs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]));
        worst = std::max(worst, d / std::max(std::abs(static_cast<double>(b.data[i])), floor));
    }
    return worst;
}

/// Central finite differences vs the analytic gradients over every
/// parameter entry; returns the worst relative mismatch.
inline double grad_check_worst(const saap::QModel& model, const saap::TensorBlock& queries,
                               const saap::Mat& target, double h = 1e-5) {
    saap::QGrads grads;
    saap::qmodel_loss_and_grads(model, queries, target, &grads);
    std::vector<saap::Mat*> grad_refs = saap::param_refs(grads);

    double worst = 0.0;
    for (std::size_t p = 0; p < grad_refs.size(); ++p) {
        for (std::size_t e = 0; e < grad_refs[p]->data.size(); ++e) {
            saap::QModel probe = model;
            std::vector<saap::Mat*> params = saap::param_refs(probe);
            params[p]->data[e] += h;
            double up = saap::qmodel_loss_and_grads(probe, queries, target, nullptr);
            params[p]->data[e] -= 2.0 * h;
            double down = saap::qmodel_loss_and_grads(probe, queries, target, nullptr);
            double fd = (up - down) / (2.0 * h);
            double an = grad_refs[p]->data[e];
            double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-4});
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

/// Scratch directory removed on scope exit.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::uint64_t counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("saap_test_" + tag + "_" + std::to_string(++counter) + "_" +
                 std::to_string(static_cast<std::uint64_t>(::getpid())));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

} // namespace oracles
