#include "lidit/fixture.hpp"

#include <cstring>
#include <fstream>

namespace lidit {

namespace {

constexpr char kMagic[4] = {'L', 'I', 'E', 'F'};
constexpr uint32_t kVersion = 1;

void write_u32(std::ofstream& f, uint32_t v) {
    f.write(reinterpret_cast<const char*>(&v), 4);
}

uint32_t read_u32(std::ifstream& f, const std::string& path) {
    uint32_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 4);
    if (f.gcount() != 4)
        throw FixtureError(FixtureError::Kind::TruncatedFile, "truncated header: " + path);
    return v;
}

}  // namespace

void save_fixture(const FixtureData& fx, const std::string& path) {
    if (fx.embeddings.size() != static_cast<size_t>(fx.L) * fx.d_enc || fx.mask.size() != fx.L)
        throw FixtureError(FixtureError::Kind::BadHeader, "fixture fields inconsistent");
    if (fx.instruction_len >= fx.L && fx.L > 0)
        throw FixtureError(FixtureError::Kind::BadHeader, "instruction_len must be < L");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw FixtureError(FixtureError::Kind::Io, "cannot open for writing: " + path);
    f.write(kMagic, 4);
    write_u32(f, kVersion);
    write_u32(f, fx.L);
    write_u32(f, fx.d_enc);
    write_u32(f, fx.instruction_len);
    f.write(reinterpret_cast<const char*>(fx.embeddings.data()),
            static_cast<std::streamsize>(fx.embeddings.size() * sizeof(float)));
    f.write(reinterpret_cast<const char*>(fx.mask.data()),
            static_cast<std::streamsize>(fx.mask.size()));
    if (!f) throw FixtureError(FixtureError::Kind::Io, "short write: " + path);
}

FixtureData load_fixture(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FixtureError(FixtureError::Kind::Io, "cannot open: " + path);
    char magic[4] = {};
    f.read(magic, 4);
    if (f.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0)
        throw FixtureError(FixtureError::Kind::BadMagic, "bad magic bytes: " + path);
    uint32_t version = read_u32(f, path);
    if (version != kVersion)
        throw FixtureError(FixtureError::Kind::VersionMismatch,
                           "unsupported fixture version " + std::to_string(version) + ": " + path);
    FixtureData fx;
    fx.L = read_u32(f, path);
    fx.d_enc = read_u32(f, path);
    fx.instruction_len = read_u32(f, path);
    if (fx.L == 0 || fx.d_enc == 0 || fx.instruction_len >= fx.L)
        throw FixtureError(FixtureError::Kind::BadHeader, "inconsistent header fields: " + path);
    fx.embeddings.resize(static_cast<size_t>(fx.L) * fx.d_enc);
    f.read(reinterpret_cast<char*>(fx.embeddings.data()),
           static_cast<std::streamsize>(fx.embeddings.size() * sizeof(float)));
    if (f.gcount() != static_cast<std::streamsize>(fx.embeddings.size() * sizeof(float)))
        throw FixtureError(FixtureError::Kind::TruncatedFile, "payload shorter than header claims: " + path);
    fx.mask.resize(fx.L);
    f.read(reinterpret_cast<char*>(fx.mask.data()), static_cast<std::streamsize>(fx.L));
    if (f.gcount() != static_cast<std::streamsize>(fx.L))
        throw FixtureError(FixtureError::Kind::TruncatedFile, "mask shorter than header claims: " + path);
    // normalize: rows masked out are zero by contract
    for (uint32_t l = 0; l < fx.L; ++l)
        if (!fx.mask[l])
            std::fill(fx.embeddings.begin() + static_cast<ptrdiff_t>(l) * fx.d_enc,
                      fx.embeddings.begin() + static_cast<ptrdiff_t>(l + 1) * fx.d_enc, 0.0f);
    return fx;
}

}  // namespace lidit
