#pragma once

#include <cstdint>
#include <span>

#include "saap/tensor.hpp"

namespace saap {

/// Rotary transform configuration. Pair j of components (2j, 2j+1) rotates
/// by angle position * base_theta^(-2j/dim). Interleaved pairing, applied
/// and removed with the same convention so only internal consistency
/// matters.
struct RopeConfig {
    std::size_t dim = 0;
    double base_theta = 10000.0;

    void validate() const;
};

/// Rotates x in place to position `position`. Norm-preserving.
void rope_apply(std::span<float> x, std::uint64_t position, const RopeConfig& cfg);

/// Inverse rotation; rope_remove(rope_apply(x, p), p) == x within 1e-6.
void rope_remove(std::span<float> x, std::uint64_t position, const RopeConfig& cfg);

TensorBlock rope_apply_block(const TensorBlock& t, std::span<const std::uint64_t> positions,
                             const RopeConfig& cfg);
TensorBlock rope_remove_block(const TensorBlock& t, std::span<const std::uint64_t> positions,
                              const RopeConfig& cfg);

} // namespace saap
