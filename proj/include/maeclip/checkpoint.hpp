#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "maeclip/errors.hpp"
#include "maeclip/tensor.hpp"

namespace maeclip {

// --------------------------------------------------------------------------
// Checkpoint container, magic "MCLP".
//
// Layout: magic, format version u32, tensor count u32; then per tensor:
// name length u32 + UTF-8 name, ndim u32, dims u32 each, dtype tag u8
// (0 = f32, 1 = f64), raw little-endian data. Model parameters use their
// visitation names, optimizer moments live under "opt/", the rng state
// under "rng/state", and the resolved run configuration under "config/".
// --------------------------------------------------------------------------

constexpr uint32_t kCheckpointVersion = 1;

struct NamedTensorData {
    std::vector<int> shape;
    std::vector<double> values;
};

using TensorMap = std::map<std::string, NamedTensorData>;

namespace detail_ckpt {

inline void put_u32(std::ostream& os, uint32_t v) {
    uint8_t b[4] = {static_cast<uint8_t>(v), static_cast<uint8_t>(v >> 8), static_cast<uint8_t>(v >> 16),
                    static_cast<uint8_t>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t take_u32(std::istream& is, const std::string& field) {
    uint8_t b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (is.gcount() != 4) throw FormatError("checkpoint truncated while reading " + field);
    return static_cast<uint32_t>(b[0]) | static_cast<uint32_t>(b[1]) << 8 | static_cast<uint32_t>(b[2]) << 16 |
           static_cast<uint32_t>(b[3]) << 24;
}

inline void put_f64(std::ostream& os, double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    uint8_t b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<uint8_t>(bits >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline double take_f64(std::istream& is, const std::string& field) {
    uint8_t b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (is.gcount() != 8) throw FormatError("checkpoint truncated while reading " + field);
    uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<uint64_t>(b[i]) << (8 * i);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

inline float take_f32(std::istream& is, const std::string& field) {
    uint8_t b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (is.gcount() != 4) throw FormatError("checkpoint truncated while reading " + field);
    uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) bits |= static_cast<uint32_t>(b[i]) << (8 * i);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

}  // namespace detail_ckpt

inline void write_checkpoint(const std::string& path, const TensorMap& tensors) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os.write("MCLP", 4);
    detail_ckpt::put_u32(os, kCheckpointVersion);
    detail_ckpt::put_u32(os, static_cast<uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        detail_ckpt::put_u32(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail_ckpt::put_u32(os, static_cast<uint32_t>(t.shape.size()));
        for (int d : t.shape) detail_ckpt::put_u32(os, static_cast<uint32_t>(d));
        os.put(static_cast<char>(1));  // f64
        for (double v : t.values) detail_ckpt::put_f64(os, v);
    }
    if (!os) throw IoError("failed writing checkpoint to " + path);
}

inline TensorMap read_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint file " + path);
    char magic[4];
    is.read(magic, 4);
    if (is.gcount() != 4 || std::memcmp(magic, "MCLP", 4) != 0)
        throw FormatError("bad checkpoint magic (expected MCLP)");
    const uint32_t version = detail_ckpt::take_u32(is, "format version");
    if (version != kCheckpointVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    const uint32_t count = detail_ckpt::take_u32(is, "tensor count");
    TensorMap out;
    for (uint32_t i = 0; i < count; ++i) {
        const uint32_t name_len = detail_ckpt::take_u32(is, "tensor name length");
        if (name_len == 0 || name_len > 4096) throw FormatError("implausible tensor name length");
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        if (is.gcount() != static_cast<std::streamsize>(name_len))
            throw FormatError("checkpoint truncated while reading tensor name");
        const uint32_t ndim = detail_ckpt::take_u32(is, "ndim of " + name);
        if (ndim == 0 || ndim > 2) throw FormatError("unsupported ndim for " + name);
        NamedTensorData t;
        size_t numel = 1;
        for (uint32_t d = 0; d < ndim; ++d) {
            const uint32_t extent = detail_ckpt::take_u32(is, "dims of " + name);
            if (extent == 0 || extent > (1u << 24)) throw FormatError("implausible extent in " + name);
            t.shape.push_back(static_cast<int>(extent));
            numel *= extent;
        }
        const int dtype = is.get();
        if (dtype != 0 && dtype != 1) throw FormatError("unknown dtype tag for " + name);
        t.values.resize(numel);
        for (size_t k = 0; k < numel; ++k)
            t.values[k] = dtype == 1 ? detail_ckpt::take_f64(is, "data of " + name)
                                     : static_cast<double>(detail_ckpt::take_f32(is, "data of " + name));
        if (!out.emplace(std::move(name), std::move(t)).second)
            throw FormatError("duplicate tensor name in checkpoint");
    }
    return out;
}

inline const NamedTensorData& require_tensor(const TensorMap& map, const std::string& name) {
    auto it = map.find(name);
    if (it == map.end()) throw FormatError("checkpoint is missing tensor " + name);
    return it->second;
}

}  // namespace maeclip
