#pragma once

#include <cstdint>
#include <filesystem>

#include "evp/harness/config.hpp"
#include "evp/harness/trainer.hpp"
#include "evp/tensor_file.hpp"

namespace evp::harness {

struct Checkpoint {
  PromptState state;
  RunConfig config;
  std::string backbone_checksum;
};

// Prompt arrays (prompt.W, prompt.mask, tokens.<layer>) plus metadata:
// geometry, seed, token settings, label mapping, run config and the frozen
// backbone checksum.
TensorFile checkpoint_to_tensor_file(const PromptState& state, const RunConfig& config,
                                     std::uint64_t backbone_checksum);
Checkpoint checkpoint_from_tensor_file(const TensorFile& file);

void save_checkpoint(const std::filesystem::path& path, const PromptState& state,
                     const RunConfig& config, std::uint64_t backbone_checksum);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace evp::harness
