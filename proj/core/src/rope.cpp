#include "saap/rope.hpp"

#include <cmath>
#include <stdexcept>

namespace saap {

void RopeConfig::validate() const {
    if (dim == 0 || dim % 2 != 0) {
        throw std::invalid_argument("RopeConfig: dim must be even and positive, got " +
                                    std::to_string(dim));
    }
    if (!(base_theta > 0.0)) {
        throw std::invalid_argument("RopeConfig: base_theta must be positive");
    }
}

namespace {

std::vector<double> pair_frequencies(const RopeConfig& cfg) {
    std::vector<double> thetas(cfg.dim / 2);
    const double inv_dim = 1.0 / static_cast<double>(cfg.dim);
    for (std::size_t j = 0; j < thetas.size(); ++j) {
        thetas[j] = std::pow(cfg.base_theta, -2.0 * static_cast<double>(j) * inv_dim);
    }
    return thetas;
}

void rotate_with(std::span<float> x, std::uint64_t position, std::span<const double> thetas,
                 double sign) {
    const double p = static_cast<double>(position);
    for (std::size_t j = 0; j < thetas.size(); ++j) {
        double angle = sign * p * thetas[j];
        double c = std::cos(angle);
        double s = std::sin(angle);
        double x0 = x[2 * j];
        double x1 = x[2 * j + 1];
        x[2 * j] = static_cast<float>(x0 * c - x1 * s);
        x[2 * j + 1] = static_cast<float>(x0 * s + x1 * c);
    }
}

void rotate(std::span<float> x, std::uint64_t position, const RopeConfig& cfg, double sign) {
    cfg.validate();
    if (x.size() != cfg.dim) {
        throw std::invalid_argument("rope: vector length " + std::to_string(x.size()) +
                                    " does not match configured dim " + std::to_string(cfg.dim));
    }
    auto thetas = pair_frequencies(cfg);
    rotate_with(x, position, thetas, sign);
}

TensorBlock rotate_block(const TensorBlock& t, std::span<const std::uint64_t> positions,
                         const RopeConfig& cfg, double sign) {
    cfg.validate();
    if (t.dim != cfg.dim) {
        throw std::invalid_argument("rope: block dim " + std::to_string(t.dim) +
                                    " does not match configured dim " + std::to_string(cfg.dim));
    }
    if (positions.size() != t.rows) {
        throw std::invalid_argument("rope: positions length " + std::to_string(positions.size()) +
                                    " does not match rows " + std::to_string(t.rows));
    }
    auto thetas = pair_frequencies(cfg);
    TensorBlock out = t;
    for (std::size_t i = 0; i < out.rows; ++i) {
        rotate_with(std::span<float>(out.row(i), out.dim), positions[i], thetas, sign);
    }
    return out;
}

} // namespace

void rope_apply(std::span<float> x, std::uint64_t position, const RopeConfig& cfg) {
    rotate(x, position, cfg, 1.0);
}

void rope_remove(std::span<float> x, std::uint64_t position, const RopeConfig& cfg) {
    rotate(x, position, cfg, -1.0);
}

TensorBlock rope_apply_block(const TensorBlock& t, std::span<const std::uint64_t> positions,
                             const RopeConfig& cfg) {
    return rotate_block(t, positions, cfg, 1.0);
}

TensorBlock rope_remove_block(const TensorBlock& t, std::span<const std::uint64_t> positions,
                              const RopeConfig& cfg) {
    return rotate_block(t, positions, cfg, -1.0);
}

} // namespace saap
