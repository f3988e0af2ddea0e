#pragma once

#include <map>
#include <string>

#include "lidit/model.hpp"
#include "lidit/trainer.hpp"

namespace lidit {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct AblationSwitches {
    std::string preset = "default";
    bool instruction = true;
    bool token_refiner = true;
    bool refiner_full_attention = true;
    bool gating = true;
    int64_t refiner_blocks = 2;
    FusionMode fusion = FusionMode::Collab;
    int64_t single_encoder = 1;  // 1-based
};

// One named preset per ablation-table row: only the listed switches differ
// from the default configuration.
const std::map<std::string, std::map<std::string, std::string>>& ablation_presets();

struct RunConfig {
    ModelConfig model;        // encoders and pipeline resolved from the file
    TrainConfig train;
    AblationSwitches ablation;
    int64_t sample_steps = 100;
    double cfg_scale = 4.0;
    std::string resolved_text;  // canonical fully-explicit config
    uint64_t config_hash = 0;
};

RunConfig parse_run_config(const std::string& text, const std::string& filename);
RunConfig load_run_config(const std::string& path);

// canonical emission: fixed section and key order, explicit ablation values
std::string resolve_config_text(const RunConfig& cfg);

// the default micro-scale configuration as a config file
std::string default_config_text();

}  // namespace lidit
