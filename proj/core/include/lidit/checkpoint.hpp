#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "lidit/nn.hpp"

namespace lidit {

struct CheckpointError : std::runtime_error {
    enum class Kind { BadMagic, VersionMismatch, TruncatedFile, MissingTensor, ShapeMismatch, Io };
    Kind kind;
    CheckpointError(Kind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
};

// One tensor record of the "LIDT" container:
//   magic "LIDT" | u32 version=1 | u32 tensor count
//   per tensor: u16 name length | name bytes | u8 rank | rank x u32 extents |
//               float32 payload, little-endian row-major
struct TensorRecord {
    std::string name;
    std::vector<uint32_t> extents;
    std::vector<float> data;
};

void write_checkpoint(const std::string& path, const std::vector<TensorRecord>& records);
std::vector<TensorRecord> read_checkpoint(const std::string& path);

// bit-exact integer smuggled through a float payload
inline TensorRecord scalar_record(const std::string& name, uint64_t value) {
    TensorRecord r;
    r.name = name;
    r.extents = {2};
    uint32_t lo = static_cast<uint32_t>(value & 0xffffffffull);
    uint32_t hi = static_cast<uint32_t>(value >> 32);
    float flo, fhi;
    static_assert(sizeof(float) == sizeof(uint32_t));
    std::memcpy(&flo, &lo, 4);
    std::memcpy(&fhi, &hi, 4);
    r.data = {flo, fhi};
    return r;
}

inline uint64_t scalar_from_record(const TensorRecord& r) {
    if (r.data.size() != 2)
        throw CheckpointError(CheckpointError::Kind::ShapeMismatch, "scalar record " + r.name);
    uint32_t lo, hi;
    std::memcpy(&lo, &r.data[0], 4);
    std::memcpy(&hi, &r.data[1], 4);
    return (static_cast<uint64_t>(hi) << 32) | lo;
}

template <class S>
void append_store(std::vector<TensorRecord>& out, const ParamStore<S>& ps, const std::string& prefix) {
    for (const auto& [name, t] : ps.items) {
        TensorRecord r;
        r.name = prefix + name;
        for (int64_t d : t.shape()) r.extents.push_back(static_cast<uint32_t>(d));
        r.data.resize(static_cast<size_t>(t.numel()));
        for (int64_t i = 0; i < t.numel(); ++i) r.data[static_cast<size_t>(i)] = static_cast<float>(t.at(i));
        out.push_back(std::move(r));
    }
}

template <class S>
void load_store(const std::vector<TensorRecord>& records, ParamStore<S>& ps, const std::string& prefix) {
    for (auto& [name, t] : ps.items) {
        const TensorRecord* found = nullptr;
        for (const auto& r : records)
            if (r.name == prefix + name) {
                found = &r;
                break;
            }
        if (!found)
            throw CheckpointError(CheckpointError::Kind::MissingTensor, "missing tensor: " + prefix + name);
        Shape shape;
        for (uint32_t e : found->extents) shape.push_back(static_cast<int64_t>(e));
        if (shape != t.shape())
            throw CheckpointError(CheckpointError::Kind::ShapeMismatch,
                                  "shape mismatch for " + found->name + ": file " + shape_str(shape) +
                                      " vs model " + shape_str(t.shape()));
        for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = static_cast<S>(found->data[static_cast<size_t>(i)]);
    }
}

}  // namespace lidit
