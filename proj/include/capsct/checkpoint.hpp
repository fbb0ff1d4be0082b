#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "capsct/optim.hpp"

namespace capsct {

inline constexpr std::uint16_t kCheckpointVersion = 1;

// "CVCP", u16 version, u32 entry count, then per entry a u32-length name,
// u32 rank, u32 extents and f32 values, then a u32-length JSON config.
// Integers and reals are little-endian.
struct Checkpoint {
  ParameterSet params;  // running batch-norm statistics are non-trainable
  nlohmann::json config;
};

std::string encode_checkpoint(const ParameterSet& params, const nlohmann::json& config);
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const ParameterSet& params,
                     const nlohmann::json& config);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Rounds every value to single precision, matching a save/load round trip.
void round_to_float(ParameterSet& params);

}  // namespace capsct
