#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "saap/tensor.hpp"

namespace saap {

// Binary tensor file, little-endian, no padding, no checksum:
//   magic "SAAPTNS1" (8 bytes), u32 dtype (0 = f32, 1 = u64),
//   u32 ndim, ndim x u64 dims, row-major payload.

enum class IoErrorKind {
    OpenFailed,
    BadMagic,
    BadVersion,
    BadDtype,
    BadShape,
    Truncated,
};

class IoError : public std::runtime_error {
public:
    IoError(IoErrorKind kind, const std::string& msg)
            : std::runtime_error(msg), kind_(kind) {}

    IoErrorKind kind() const {
        return kind_;
    }

private:
    IoErrorKind kind_;
};

/// Writes t as a 2-d f32 tensor. Round trips are bit-exact.
void tensor_write(const TensorBlock& t, const std::filesystem::path& path);
TensorBlock tensor_read(const std::filesystem::path& path);

/// u64 sequences (IVF offset/permutation tables, positions) as 1-d tensors.
void u64_write(const std::vector<std::uint64_t>& v, const std::filesystem::path& path);
std::vector<std::uint64_t> u64_read(const std::filesystem::path& path);

} // namespace saap
