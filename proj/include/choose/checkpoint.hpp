#pragma once

#include <cstdint>
#include <string>

#include "choose/model.hpp"

namespace choose {

struct CheckpointProvenance {
    std::string config_hash;
    long steps = 0;
    double final_loss = 0.0;
    std::uint64_t seed = 0;
};

struct Checkpoint {
    ModelParams<float> params;
    CheckpointProvenance provenance;
};

// Writes `manifest.json` plus `weights.bin` (little-endian float32, entries
// concatenated in manifest order) into `dir`, creating it if needed.
void save_checkpoint(const std::string& dir, ModelParams<float>& params,
                     const CheckpointProvenance& prov);

Checkpoint load_checkpoint(const std::string& dir);

// FNV-1a over a canonical string; used to fingerprint configs
std::string fnv1a_hex(const std::string& s);

}  // namespace choose
