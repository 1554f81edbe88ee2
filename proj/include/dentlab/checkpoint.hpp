#pragma once

// Model checkpoints: one binary file with a versioned header followed by flat
// little-endian fp32 arrays in declaration order (parameters, then BN
// statistics). The exact layout is documented in the README so checkpoints
// are portable across implementations.

#include <string>

#include "dentlab/nn.hpp"

namespace dentlab {

inline constexpr uint32_t kCheckpointVersion = 1;

void save_checkpoint(Model<float>& model, const std::string& path);

Model<float> load_checkpoint(const std::string& path);

}  // namespace dentlab
