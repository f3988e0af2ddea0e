#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace lidit {

struct FixtureError : std::runtime_error {
    enum class Kind { BadMagic, VersionMismatch, TruncatedFile, BadHeader, Io };
    Kind kind;
    FixtureError(Kind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
};

// On-disk prompt-embedding record. Layout (little-endian):
//   "LIEF" | u32 version=1 | u32 L | u32 d_enc | u32 instruction_len
//   L*d_enc float32 row-major | L mask bytes (0/1)
struct FixtureData {
    uint32_t L = 0;
    uint32_t d_enc = 0;
    uint32_t instruction_len = 0;
    std::vector<float> embeddings;  // L * d_enc
    std::vector<uint8_t> mask;      // L
};

void save_fixture(const FixtureData& f, const std::string& path);
FixtureData load_fixture(const std::string& path);

}  // namespace lidit
