#include "evp/harness/sweep.hpp"

#include <cstdio>
#include <fstream>

#include "evp/errors.hpp"
#include "evp/harness/trainer.hpp"

namespace evp::harness {

std::string to_string(SweepKind kind) {
  switch (kind) {
    case SweepKind::kImageSize: return "image_size";
    case SweepKind::kNormalization: return "normalization";
    case SweepKind::kAugmentation: return "augmentation";
  }
  return "?";
}

std::string SweepTable::to_tsv() const {
  std::string out = "# sweep " + to_string(kind) + "\nlabel\tprompt_params\ttrain_loss\teval_top1\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%s\t%zu\t%.6f\t%.4f\n", r.label.c_str(), r.prompt_params,
                  r.train_loss, r.eval_top1);
    out += buf;
  }
  return out;
}

std::vector<SweepCell> image_size_grid(const RunConfig& base, const std::vector<int>& inner_sizes) {
  if (!base.geometry) throw Error(ErrorKind::kConfig, "image-size sweep needs a pixel prompt");
  std::vector<SweepCell> cells;
  for (int k : inner_sizes) {
    SweepCell c{std::to_string(k), base};
    c.config.geometry->mode = PromptMode::kShrinkPad;
    c.config.geometry->outer_size = base.backbone.native_size;
    c.config.geometry->inner_size = k;
    c.config.geometry->validate();
    cells.push_back(std::move(c));
  }
  return cells;
}

std::vector<SweepCell> normalization_grid(const RunConfig& base, const std::vector<NormKind>& modes) {
  std::vector<SweepCell> cells;
  for (NormKind m : modes) {
    SweepCell c{to_string(m), base};
    c.config.normalization.kind = m;
    cells.push_back(std::move(c));
  }
  return cells;
}

std::vector<SweepCell> augmentation_grid(const RunConfig& base) {
  AugmentationPolicy none = AugmentationPolicy::identity();
  none.seed = base.augmentation.seed;
  AugmentationPolicy flip = none;
  flip.flip = true;
  AugmentationPolicy randaug = flip;
  randaug.randaug = true;
  AugmentationPolicy cutmix = flip;
  cutmix.cutmix = true;

  std::vector<SweepCell> cells;
  for (auto& [label, policy] : std::vector<std::pair<std::string, AugmentationPolicy>>{
           {"none", none}, {"flip", flip}, {"flip+randaug", randaug}, {"flip+cutmix", cutmix}}) {
    SweepCell c{label, base};
    c.config.augmentation.flip = policy.flip;
    c.config.augmentation.randaug = policy.randaug;
    c.config.augmentation.cutmix = policy.cutmix;
    cells.push_back(std::move(c));
  }
  return cells;
}

SweepTable run_sweep(SweepKind kind, const std::vector<SweepCell>& cells) {
  if (cells.empty()) return {kind, {}};
  const RunConfig& first = cells.front().config;
  first.validate();
  const DatasetSplits data = load_dataset(first.dataset, first.backbone.native_size,
                                          first.backbone.channels, subsample_seed(first));
  return run_sweep(kind, cells, data);
}

SweepTable run_sweep(SweepKind kind, const std::vector<SweepCell>& cells, const DatasetSplits& data) {
  SweepTable table{kind, {}};
  TrainOptions options;
  options.write_outputs = false;
  options.evaluate_each_epoch = false;
  for (const SweepCell& cell : cells) {
    const Backbone backbone = make_backbone(cell.config);
    const TrainResult result = train(cell.config, backbone, data, options);
    SweepRow row;
    row.label = cell.label;
    row.prompt_params = result.state.parameter_count();
    row.train_loss = evaluate(backbone, result.state, data.train, cell.config).loss;
    row.eval_top1 = evaluate(backbone, result.state, data.eval, cell.config).top1;
    table.rows.push_back(std::move(row));
  }
  return table;
}

void write_sweep_table(const std::filesystem::path& path, const SweepTable& table) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::kIo, "cannot write '" + path.string() + "'");
  out << table.to_tsv();
  if (!out) throw Error(ErrorKind::kIo, "failed writing '" + path.string() + "'");
}

}  // namespace evp::harness
