#include "lidit/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace lidit {

namespace {

constexpr char kMagic[4] = {'L', 'I', 'D', 'T'};
constexpr uint32_t kVersion = 1;

template <class T>
void write_raw(std::ofstream& f, const T& v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_raw(std::ifstream& f, const std::string& path) {
    T v{};
    f.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (f.gcount() != sizeof(T))
        throw CheckpointError(CheckpointError::Kind::TruncatedFile, "truncated checkpoint: " + path);
    return v;
}

}  // namespace

void write_checkpoint(const std::string& path, const std::vector<TensorRecord>& records) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw CheckpointError(CheckpointError::Kind::Io, "cannot open for writing: " + path);
    f.write(kMagic, 4);
    write_raw(f, kVersion);
    write_raw(f, static_cast<uint32_t>(records.size()));
    for (const auto& r : records) {
        if (r.name.size() > 0xffff)
            throw CheckpointError(CheckpointError::Kind::Io, "tensor name too long: " + r.name);
        uint64_t numel = 1;
        for (uint32_t e : r.extents) numel *= e;
        if (numel != r.data.size())
            throw CheckpointError(CheckpointError::Kind::ShapeMismatch,
                                  "extents do not match payload for " + r.name);
        write_raw(f, static_cast<uint16_t>(r.name.size()));
        f.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
        write_raw(f, static_cast<uint8_t>(r.extents.size()));
        for (uint32_t e : r.extents) write_raw(f, e);
        f.write(reinterpret_cast<const char*>(r.data.data()),
                static_cast<std::streamsize>(r.data.size() * sizeof(float)));
    }
    if (!f) throw CheckpointError(CheckpointError::Kind::Io, "short write: " + path);
}

std::vector<TensorRecord> read_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError(CheckpointError::Kind::Io, "cannot open: " + path);
    char magic[4] = {};
    f.read(magic, 4);
    if (f.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0)
        throw CheckpointError(CheckpointError::Kind::BadMagic, "bad checkpoint magic: " + path);
    uint32_t version = read_raw<uint32_t>(f, path);
    if (version != kVersion)
        throw CheckpointError(CheckpointError::Kind::VersionMismatch,
                              "unsupported checkpoint version " + std::to_string(version));
    uint32_t count = read_raw<uint32_t>(f, path);
    std::vector<TensorRecord> records;
    records.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        TensorRecord r;
        uint16_t name_len = read_raw<uint16_t>(f, path);
        r.name.resize(name_len);
        f.read(r.name.data(), name_len);
        if (f.gcount() != name_len)
            throw CheckpointError(CheckpointError::Kind::TruncatedFile, "truncated name: " + path);
        uint8_t rank = read_raw<uint8_t>(f, path);
        uint64_t numel = 1;
        for (uint8_t d = 0; d < rank; ++d) {
            uint32_t e = read_raw<uint32_t>(f, path);
            r.extents.push_back(e);
            numel *= e;
        }
        r.data.resize(numel);
        f.read(reinterpret_cast<char*>(r.data.data()), static_cast<std::streamsize>(numel * sizeof(float)));
        if (f.gcount() != static_cast<std::streamsize>(numel * sizeof(float)))
            throw CheckpointError(CheckpointError::Kind::TruncatedFile,
                                  "truncated payload for " + r.name + ": " + path);
        records.push_back(std::move(r));
    }
    return records;
}

}  // namespace lidit
