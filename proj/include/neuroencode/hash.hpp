#pragma once

#include <cstdint>
#include <cstring>
#include <string>

#include "neuroencode/types.hpp"

namespace neuroencode {

// FNV-1a over bytes; the checksum used in manifests and frozen-weight audits.
inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t hash_matrix(const Matrix& m, std::uint64_t h = 0xcbf29ce484222325ULL) {
    const std::int64_t dims[2] = {m.rows(), m.cols()};
    h = fnv1a64(dims, sizeof(dims), h);
    return fnv1a64(m.data(), sizeof(double) * static_cast<std::size_t>(m.size()), h);
}

inline std::string hash_hex(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

}  // namespace neuroencode
