#include "saap/tensor_io.hpp"

#include <array>
#include <cstdio>
#include <cstring>
#include <memory>

namespace saap {

namespace {

constexpr std::array<char, 7> kMagic = {'S', 'A', 'A', 'P', 'T', 'N', 'S'};
constexpr char kVersion = '1';
constexpr std::uint32_t kDtypeF32 = 0;
constexpr std::uint32_t kDtypeU64 = 1;

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) {
            std::fclose(f);
        }
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
    FilePtr f(std::fopen(path.string().c_str(), mode));
    if (!f) {
        throw IoError(IoErrorKind::OpenFailed,
                      "cannot open " + path.string() + " (mode " + mode + ")");
    }
    return f;
}

void write_raw(std::FILE* f, const void* p, std::size_t n, const std::filesystem::path& path) {
    if (n > 0 && std::fwrite(p, 1, n, f) != n) {
        throw IoError(IoErrorKind::OpenFailed, "short write to " + path.string());
    }
}

void read_raw(std::FILE* f, void* p, std::size_t n, const std::filesystem::path& path,
              const char* what) {
    if (n > 0 && std::fread(p, 1, n, f) != n) {
        throw IoError(IoErrorKind::Truncated,
                      path.string() + ": truncated while reading " + what);
    }
}

// Headers are assembled field by field so the on-disk layout stays fixed
// regardless of host struct padding. Host is assumed little-endian.
void write_header(std::FILE* f, std::uint32_t dtype, const std::vector<std::uint64_t>& dims,
                  const std::filesystem::path& path) {
    write_raw(f, kMagic.data(), kMagic.size(), path);
    write_raw(f, &kVersion, 1, path);
    write_raw(f, &dtype, sizeof(dtype), path);
    std::uint32_t ndim = static_cast<std::uint32_t>(dims.size());
    write_raw(f, &ndim, sizeof(ndim), path);
    for (std::uint64_t d : dims) {
        write_raw(f, &d, sizeof(d), path);
    }
}

std::vector<std::uint64_t> read_header(std::FILE* f, std::uint32_t expect_dtype,
                                       const std::filesystem::path& path) {
    std::array<char, 7> magic;
    read_raw(f, magic.data(), magic.size(), path, "magic");
    if (magic != kMagic) {
        throw IoError(IoErrorKind::BadMagic, path.string() + ": bad magic bytes");
    }
    char version = 0;
    read_raw(f, &version, 1, path, "version");
    if (version != kVersion) {
        throw IoError(IoErrorKind::BadVersion,
                      path.string() + ": unsupported format version '" +
                              std::string(1, version) + "'");
    }
    std::uint32_t dtype = 0;
    read_raw(f, &dtype, sizeof(dtype), path, "dtype");
    if (dtype != expect_dtype) {
        throw IoError(IoErrorKind::BadDtype,
                      path.string() + ": dtype " + std::to_string(dtype) + ", expected " +
                              std::to_string(expect_dtype));
    }
    std::uint32_t ndim = 0;
    read_raw(f, &ndim, sizeof(ndim), path, "ndim");
    if (ndim > 8) {
        throw IoError(IoErrorKind::BadShape,
                      path.string() + ": implausible ndim " + std::to_string(ndim));
    }
    std::vector<std::uint64_t> dims(ndim);
    for (auto& d : dims) {
        read_raw(f, &d, sizeof(d), path, "dims");
    }
    return dims;
}

void check_at_eof(std::FILE* f, const std::filesystem::path& path) {
    unsigned char c = 0;
    if (std::fread(&c, 1, 1, f) == 1) {
        throw IoError(IoErrorKind::BadShape, path.string() + ": trailing bytes after payload");
    }
}

} // namespace

void tensor_write(const TensorBlock& t, const std::filesystem::path& path) {
    if (t.data.size() != t.rows * t.dim) {
        throw std::invalid_argument("tensor_write: data size does not match shape " +
                                    shape_str(t.rows, t.dim));
    }
    FilePtr f = open_file(path, "wb");
    write_header(f.get(), kDtypeF32, {t.rows, t.dim}, path);
    write_raw(f.get(), t.data.data(), t.data.size() * sizeof(float), path);
}

TensorBlock tensor_read(const std::filesystem::path& path) {
    FilePtr f = open_file(path, "rb");
    auto dims = read_header(f.get(), kDtypeF32, path);
    if (dims.size() != 2) {
        throw IoError(IoErrorKind::BadShape,
                      path.string() + ": expected 2-d tensor, got ndim " +
                              std::to_string(dims.size()));
    }
    TensorBlock t;
    t.rows = static_cast<std::size_t>(dims[0]);
    t.dim = static_cast<std::size_t>(dims[1]);
    t.data.resize(t.rows * t.dim);
    read_raw(f.get(), t.data.data(), t.data.size() * sizeof(float), path, "payload");
    check_at_eof(f.get(), path);
    t.validate(path.string().c_str());
    return t;
}

void u64_write(const std::vector<std::uint64_t>& v, const std::filesystem::path& path) {
    FilePtr f = open_file(path, "wb");
    write_header(f.get(), kDtypeU64, {v.size()}, path);
    write_raw(f.get(), v.data(), v.size() * sizeof(std::uint64_t), path);
}

std::vector<std::uint64_t> u64_read(const std::filesystem::path& path) {
    FilePtr f = open_file(path, "rb");
    auto dims = read_header(f.get(), kDtypeU64, path);
    if (dims.size() != 1) {
        throw IoError(IoErrorKind::BadShape,
                      path.string() + ": expected 1-d sequence, got ndim " +
                              std::to_string(dims.size()));
    }
    std::vector<std::uint64_t> v(static_cast<std::size_t>(dims[0]));
    read_raw(f.get(), v.data(), v.size() * sizeof(std::uint64_t), path, "payload");
    check_at_eof(f.get(), path);
    return v;
}

} // namespace saap
