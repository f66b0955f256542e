#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "corl/policy.hpp"

namespace corl {

// Versioned binary checkpoint: magic, format version, world hash, free-form
// metadata string, block index, raw f64 payload, trailing checksum over all
// preceding bytes. Loading verifies the checksum before trusting any field,
// so truncation or corruption surfaces as a checksum error.
struct CheckpointData {
  PolicyParams params;
  uint64_t world_hash = 0;
  std::string meta;
};

void save_checkpoint(const PolicyParams& params, uint64_t world_hash, const std::string& meta,
                     const std::filesystem::path& path);

CheckpointData load_checkpoint(const std::filesystem::path& path);

// Convenience guard: loads and fails with a world-hash error unless the
// checkpoint was produced against the expected world.
PolicyParams load_checkpoint(const std::filesystem::path& path, uint64_t expected_world_hash);

} // namespace corl
