#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "evp/backbone.hpp"
#include "evp/diversity.hpp"
#include "evp/label_mapping.hpp"
#include "evp/optimizer.hpp"
#include "evp/prompt_geometry.hpp"

namespace evp::harness {

enum class DataSource { kSynthetic, kImageFolder, kCifarBinary };
enum class CorruptionKind { kGaussianNoise, kBlur, kContrast };
enum class MappingMode { kNone, kFrequency, kArbitrary };

std::string to_string(DataSource source);
std::string to_string(CorruptionKind kind);
std::string to_string(MappingMode mode);
CorruptionKind corruption_kind_from_string(const std::string& name);

struct Corruption {
  CorruptionKind kind = CorruptionKind::kGaussianNoise;
  int severity = 0;
  bool operator==(const Corruption&) const = default;
};

struct DatasetSpec {
  DataSource source = DataSource::kSynthetic;
  std::string path;       // training data (file or directory)
  std::string eval_path;  // evaluation data
  int num_classes = 4;
  double subset_fraction = 1.0;
  std::optional<Corruption> corruption;  // evaluation only

  // Synthetic generator.
  int train_per_class = 100;
  int eval_per_class = 100;
  double margin = 1.0;
  std::uint64_t seed = 0;

  // Per-channel normalization applied before composition.
  std::vector<double> mean{0.5, 0.5, 0.5};
  std::vector<double> stddev{0.25, 0.25, 0.25};

  void validate() const;
};

struct TokenPromptConfig {
  TokenPromptMode mode = TokenPromptMode::kNone;
  int num_prompts = 0;
  int position_index = 1;
};

struct RunConfig {
  BackboneConfig backbone;
  std::string backbone_path;  // load instead of constructing from the seed

  std::optional<PromptGeometry> geometry = PromptGeometry{};
  Interpolation interpolation = Interpolation::kBilinear;
  double prompt_init_std = 0.02;
  TokenPromptConfig tokens;

  NormalizationMode normalization;
  std::optional<double> learning_rate;
  Schedule schedule = Schedule::kCosineDecay;

  AugmentationPolicy augmentation;
  DatasetSpec dataset;
  MappingMode mapping = MappingMode::kNone;
  CollisionPolicy collision_policy = CollisionPolicy::kUniqueGreedy;

  std::optional<int> epochs;
  std::optional<int> batch_size;
  long max_steps = 0;  // 0: no cap
  std::uint64_t seed = 0;
  std::string output_dir;

  // Rejects missing mandatory fields (learning_rate, epochs, batch_size) and
  // inconsistent settings.
  void validate() const;
  // Output directory after applying EVP_OUTPUT_ROOT to relative paths.
  std::filesystem::path resolved_output_dir() const;
};

// Serialized form excludes output_dir so equal experiments written to
// different directories produce identical bytes.
nlohmann::json to_json(const RunConfig& config);
// Overlays `j` on top of `base`; unknown keys are config errors.
RunConfig merge_json(const RunConfig& base, const nlohmann::json& j);
RunConfig load_config_file(const std::filesystem::path& path, const RunConfig& base = {});

}  // namespace evp::harness
