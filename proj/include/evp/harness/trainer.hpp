#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include "evp/backbone.hpp"
#include "evp/harness/config.hpp"
#include "evp/harness/dataset.hpp"
#include "evp/harness/metrics.hpp"
#include "evp/label_mapping.hpp"
#include "evp/prompt_geometry.hpp"

namespace evp::harness {

// Everything learned (or fixed before learning) for one run.
struct PromptState {
  std::optional<PromptTemplate> pixel;
  TokenPrompts tokens;
  std::optional<LabelMapping> mapping;

  std::size_t parameter_count() const;
};

struct TrainOptions {
  bool write_outputs = true;
  bool evaluate_each_epoch = true;
  std::function<void(const MetricsRecord&)> on_record;
};

struct TrainResult {
  PromptState state;
  std::vector<MetricsRecord> records;
  std::vector<double> step_losses;  // batch-mean loss per optimizer step
  std::uint64_t checksum_before = 0;
  std::uint64_t checksum_after = 0;
  long steps = 0;
  std::filesystem::path output_dir;
};

Backbone make_backbone(const RunConfig& config);

// Initial prompt state: seeded Gaussian pixel/token prompts and, when
// configured, the label mapping computed on the training split.
PromptState initial_state(const RunConfig& config, const Backbone& backbone, const Dataset& train);

// Normalized image -> composed backbone input.
Image prepare_input(const Image& normalized, const PromptState& state, const RunConfig& config);

// Downstream logits for a normalized image.
Vector predict(const Backbone& backbone, const PromptState& state, const RunConfig& config,
               const Image& normalized);

// Identity augmentation pipeline; corruption (if any) is applied to raw
// pixels before normalization.
MetricsRecord evaluate(const Backbone& backbone, const PromptState& state, const Dataset& dataset,
                       const RunConfig& config, std::optional<Corruption> corruption = std::nullopt,
                       int epoch = 0);

TrainResult train(const RunConfig& config, const TrainOptions& options = {});
TrainResult train(const RunConfig& config, const Backbone& backbone, const DatasetSplits& data,
                  const TrainOptions& options = {});

// Subsample seed used for a run's training split.
std::uint64_t subsample_seed(const RunConfig& config);

}  // namespace evp::harness
