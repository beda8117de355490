#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "evp/harness/config.hpp"
#include "evp/harness/dataset.hpp"
#include "evp/optimizer.hpp"

namespace evp::harness {

enum class SweepKind { kImageSize, kNormalization, kAugmentation };

std::string to_string(SweepKind kind);

struct SweepRow {
  std::string label;
  std::size_t prompt_params = 0;
  double train_loss = 0.0;  // evaluated on the training split after the last step
  double eval_top1 = 0.0;
};

struct SweepTable {
  SweepKind kind = SweepKind::kImageSize;
  std::vector<SweepRow> rows;

  std::string to_tsv() const;
};

// One grid cell is the base config with a single field replaced.
struct SweepCell {
  std::string label;
  RunConfig config;
};

std::vector<SweepCell> image_size_grid(const RunConfig& base, const std::vector<int>& inner_sizes);
std::vector<SweepCell> normalization_grid(const RunConfig& base, const std::vector<NormKind>& modes);
// Rows: none, flip, flip+randaug, flip+cutmix.
std::vector<SweepCell> augmentation_grid(const RunConfig& base);

// Every cell trains from scratch on the same data; nothing carries over
// between cells.
SweepTable run_sweep(SweepKind kind, const std::vector<SweepCell>& cells);
SweepTable run_sweep(SweepKind kind, const std::vector<SweepCell>& cells, const DatasetSplits& data);

void write_sweep_table(const std::filesystem::path& path, const SweepTable& table);

}  // namespace evp::harness
