// evp: train, evaluate and inspect border prompts on a frozen backbone.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "evp/errors.hpp"
#include "evp/harness/checkpoint.hpp"
#include "evp/harness/config.hpp"
#include "evp/harness/dataset.hpp"
#include "evp/harness/linear_probe.hpp"
#include "evp/harness/sweep.hpp"
#include "evp/harness/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace evp;
using namespace evp::harness;

namespace {

enum Exit { kOk = 0, kUsage = 2, kConfigExit = 3, kDatasetExit = 4, kNumericExit = 5, kIoExit = 6 };

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidDataset:
    case ErrorKind::kCapacity:
      return kDatasetExit;
    case ErrorKind::kNumeric:
      return kNumericExit;
    case ErrorKind::kIo:
      return kIoExit;
    default:
      return kConfigExit;
  }
}

// Flags that mirror RunConfig. Unset flags leave the config file value alone.
struct RunFlags {
  std::string config_path;
  std::optional<std::string> output_dir;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs, batch_size;
  std::optional<long> max_steps;
  std::optional<double> lr;
  std::optional<std::string> schedule, norm;
  std::optional<std::string> prompt_mode, interpolation;
  std::optional<int> outer_size, inner_size;
  std::optional<std::string> tokens;
  std::optional<int> num_prompts, position_index;
  std::optional<bool> flip, randaug, cutmix;
  std::optional<std::string> source, data_path, eval_path;
  std::optional<int> num_classes, train_per_class, eval_per_class;
  std::optional<double> subset_fraction, margin;
  std::optional<std::string> corruption;
  std::optional<std::string> mapping, collision_policy;
  std::optional<std::string> backbone_path;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "JSON config file providing defaults")->check(CLI::ExistingFile);
    app->add_option("--output-dir", output_dir, "Run output directory");
    app->add_option("--seed", seed);
    app->add_option("--epochs", epochs);
    app->add_option("--batch-size", batch_size);
    app->add_option("--max-steps", max_steps, "Stop after this many optimizer steps (0: no cap)");
    app->add_option("--lr", lr, "Learning rate");
    app->add_option("--schedule", schedule, "constant | cosine");
    app->add_option("--norm", norm, "none | l1 | linf | l2_partial | l2_whole");
    app->add_option("--prompt-mode", prompt_mode, "shrink_pad | outer_pad_with_pe | outer_pad_no_pe | overlay_add | none");
    app->add_option("--outer-size", outer_size);
    app->add_option("--inner-size", inner_size);
    app->add_option("--interpolation", interpolation, "bilinear | area");
    app->add_option("--tokens", tokens, "none | vpt | vpnt | deep");
    app->add_option("--num-prompts", num_prompts);
    app->add_option("--position-index", position_index);
    app->add_flag("--flip,!--no-flip", flip);
    app->add_flag("--randaug,!--no-randaug", randaug);
    app->add_flag("--cutmix,!--no-cutmix", cutmix);
    app->add_option("--dataset", source, "synthetic | image_folder | cifar_binary");
    app->add_option("--data-path", data_path);
    app->add_option("--eval-path", eval_path);
    app->add_option("--num-classes", num_classes);
    app->add_option("--train-per-class", train_per_class);
    app->add_option("--eval-per-class", eval_per_class);
    app->add_option("--subset-fraction", subset_fraction);
    app->add_option("--margin", margin);
    app->add_option("--corruption", corruption, "kind:severity applied to evaluation images");
    app->add_option("--mapping", mapping, "none | frequency | arbitrary");
    app->add_option("--collision-policy", collision_policy, "unique | allow_duplicates");
    app->add_option("--backbone", backbone_path, "Backbone weights file");
  }

  RunConfig resolve() const {
    RunConfig c;
    if (!config_path.empty()) c = load_config_file(config_path);
    json j = json::object();
    auto set = [&](const char* section, const char* key, const auto& v) {
      if (v) j[section][key] = *v;
    };
    set("optimizer", "learning_rate", lr);
    set("optimizer", "schedule", schedule);
    set("optimizer", "normalization", norm);
    set("prompt", "mode", prompt_mode);
    set("prompt", "outer_size", outer_size);
    set("prompt", "inner_size", inner_size);
    set("prompt", "interpolation", interpolation);
    set("tokens", "mode", tokens);
    set("tokens", "num_prompts", num_prompts);
    set("tokens", "position_index", position_index);
    set("augmentation", "flip", flip);
    set("augmentation", "randaug", randaug);
    set("augmentation", "cutmix", cutmix);
    set("dataset", "source", source);
    set("dataset", "path", data_path);
    set("dataset", "eval_path", eval_path);
    set("dataset", "num_classes", num_classes);
    set("dataset", "train_per_class", train_per_class);
    set("dataset", "eval_per_class", eval_per_class);
    set("dataset", "subset_fraction", subset_fraction);
    set("dataset", "margin", margin);
    set("label_mapping", "mode", mapping);
    set("label_mapping", "policy", collision_policy);
    set("backbone", "path", backbone_path);
    if (corruption) j["dataset"]["corruption"] = parse_corruption(*corruption);
    if (epochs) j["epochs"] = *epochs;
    if (batch_size) j["batch_size"] = *batch_size;
    if (max_steps) j["max_steps"] = *max_steps;
    if (seed) j["seed"] = *seed;
    c = merge_json(c, j);
    if (output_dir) c.output_dir = *output_dir;
    return c;
  }

  static json parse_corruption(const std::string& text) {
    const auto colon = text.find(':');
    if (colon == std::string::npos) {
      throw Error(ErrorKind::kConfig, "corruption must be kind:severity, got '" + text + "'");
    }
    int severity = 0;
    try {
      severity = std::stoi(text.substr(colon + 1));
    } catch (const std::exception&) {
      throw Error(ErrorKind::kConfig, "bad corruption severity in '" + text + "'");
    }
    return {{"kind", text.substr(0, colon)}, {"severity", severity}};
  }
};

void print_record(const MetricsRecord& r) {
  std::cout << to_json(r).dump() << std::endl;
}

int cmd_train(const RunFlags& flags, bool quiet) {
  RunConfig config = flags.resolve();
  TrainOptions options;
  if (!quiet) options.on_record = print_record;
  const TrainResult result = train(config, options);
  std::cout << "wrote " << result.output_dir.string() << " (" << result.steps << " steps, backbone "
            << checksum_hex(result.checksum_after) << ")\n";
  return kOk;
}

// Backbone for a checkpoint: the copy saved beside it when present, else the
// config's own recipe. Either way the checksum must match.
Backbone checkpoint_backbone(const fs::path& checkpoint_path, const Checkpoint& ck) {
  const fs::path saved = checkpoint_path.parent_path() / "backbone.safetensors";
  Backbone backbone = fs::exists(saved) ? Backbone::from_tensor_file(read_tensor_file(saved))
                                        : make_backbone(ck.config);
  if (checksum_hex(backbone.checksum()) != ck.backbone_checksum) {
    throw Error(ErrorKind::kConfig, "backbone checksum " + checksum_hex(backbone.checksum()) +
                                        " does not match checkpoint (" + ck.backbone_checksum + ")");
  }
  return backbone;
}

int cmd_eval(const std::string& checkpoint, const std::string& baseline, const std::string& split,
             const std::optional<std::string>& corruption, const RunFlags& flags) {
  std::optional<Corruption> corr;
  if (corruption) {
    const json c = RunFlags::parse_corruption(*corruption);
    corr = Corruption{corruption_kind_from_string(c["kind"]), c["severity"].get<int>()};
  }

  if (!baseline.empty()) {
    RunConfig config = flags.resolve();
    const Backbone backbone = make_backbone(config);
    const DatasetSplits data = load_dataset(config.dataset, backbone.config().native_size,
                                            backbone.config().channels, subsample_seed(config));
    const Dataset& target = split == "train" ? data.train : data.eval;
    MetricsRecord r;
    if (baseline == "zero-shot") {
      r = evaluate_zero_shot(backbone, target, config.dataset);
    } else {
      r = evaluate_linear_probe(backbone, fit_linear_probe(backbone, data.train, config.dataset),
                                target, config.dataset);
    }
    r.split = split;
    print_record(r);
    return kOk;
  }

  if (checkpoint.empty()) throw Error(ErrorKind::kConfig, "eval needs --checkpoint or --baseline");
  const Checkpoint ck = load_checkpoint(checkpoint);
  const Backbone backbone = checkpoint_backbone(checkpoint, ck);
  const DatasetSplits data = load_dataset(ck.config.dataset, backbone.config().native_size,
                                          backbone.config().channels, subsample_seed(ck.config));
  if (!corr) corr = ck.config.dataset.corruption;
  MetricsRecord r = evaluate(backbone, ck.state, split == "train" ? data.train : data.eval, ck.config, corr);
  r.split = split;
  print_record(r);
  return kOk;
}

int cmd_map_labels(const RunFlags& flags, const std::string& out) {
  RunConfig config = flags.resolve();
  if (config.mapping == MappingMode::kNone) config.mapping = MappingMode::kFrequency;
  const Backbone backbone = make_backbone(config);
  const DatasetSplits data = load_dataset(config.dataset, backbone.config().native_size,
                                          backbone.config().channels, subsample_seed(config));
  const PromptState state = initial_state(config, backbone, data.train);
  const LabelMapping& m = *state.mapping;
  if (!out.empty()) write_mapping_table(out, m);
  for (std::size_t i = 0; i < m.assignment.size(); ++i) {
    std::cout << i << " -> " << m.assignment[i] << '\n';
  }
  for (const auto& e : m.collision_log) {
    std::cout << "collision: downstream " << e.downstream << " wanted " << e.contested << " (held by "
              << e.holder << "), assigned " << e.assigned << '\n';
  }
  return kOk;
}

std::vector<NormKind> parse_norm_list(const std::vector<std::string>& names) {
  std::vector<NormKind> out;
  for (const auto& n : names) out.push_back(norm_kind_from_string(n));
  return out;
}

int cmd_sweep(const RunFlags& flags, const std::vector<int>& sizes, const std::vector<std::string>& norms,
              bool augment, const std::string& out_dir) {
  const int selected = (sizes.empty() ? 0 : 1) + (norms.empty() ? 0 : 1) + (augment ? 1 : 0);
  if (selected != 1) {
    throw CLI::ValidationError("sweep", "choose exactly one of --image-size, --norm-modes, --augment");
  }
  const RunConfig base = flags.resolve();
  SweepKind kind;
  std::vector<SweepCell> cells;
  if (!sizes.empty()) {
    kind = SweepKind::kImageSize;
    cells = image_size_grid(base, sizes);
  } else if (!norms.empty()) {
    kind = SweepKind::kNormalization;
    cells = normalization_grid(base, parse_norm_list(norms));
  } else {
    kind = SweepKind::kAugmentation;
    cells = augmentation_grid(base);
  }
  const SweepTable table = run_sweep(kind, cells);
  std::cout << table.to_tsv();
  fs::path dir = !out_dir.empty() ? fs::path(out_dir)
                 : base.output_dir.empty() ? fs::path() : base.resolved_output_dir();
  if (!dir.empty()) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    write_sweep_table(dir / ("sweep_" + to_string(kind) + ".tsv"), table);
  }
  return kOk;
}

int cmd_export_prompt(const std::string& checkpoint, const std::string& out) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  if (!ck.state.pixel) throw Error(ErrorKind::kConfig, "checkpoint has no pixel prompt");
  write_ppm(out, prompt_visualization(*ck.state.pixel, ck.config.dataset.mean, ck.config.dataset.stddev));
  std::cout << "wrote " << out << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Border visual prompts on a frozen vision transformer"};
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Suppress per-epoch output");

  RunFlags train_flags, eval_flags, map_flags, sweep_flags;

  auto* train_cmd = app.add_subcommand("train", "Learn a prompt and write a run directory");
  train_flags.attach(train_cmd);

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint or a baseline");
  std::string checkpoint, baseline, split = "eval";
  std::optional<std::string> eval_corruption;
  eval_cmd->add_option("--checkpoint", checkpoint, "Prompt checkpoint (.safetensors)")->check(CLI::ExistingFile);
  eval_cmd->add_option("--baseline", baseline, "zero-shot | linear-probe (uses the run flags)")
      ->check(CLI::IsMember({"zero-shot", "linear-probe"}));
  eval_cmd->add_option("--split", split)->check(CLI::IsMember({"train", "eval"}));
  eval_cmd->add_option("--eval-corruption", eval_corruption, "kind:severity, overrides the checkpoint");
  eval_flags.attach(eval_cmd);

  auto* map_cmd = app.add_subcommand("map-labels", "Compute the frequency label mapping");
  std::string map_out;
  map_cmd->add_option("--out", map_out, "Write the mapping table here");
  map_flags.attach(map_cmd);

  auto* sweep_cmd = app.add_subcommand("sweep", "Run an ablation grid");
  std::vector<int> sizes;
  std::vector<std::string> norms;
  bool augment = false;
  std::string sweep_out;
  sweep_cmd->add_option("--image-size", sizes, "Inner image sizes, e.g. 32,28,24,20")->delimiter(',');
  sweep_cmd->add_option("--norm-modes", norms, "Normalization modes, e.g. none,l1,linf,l2_partial,l2_whole")
      ->delimiter(',');
  sweep_cmd->add_flag("--augment", augment, "Augmentation grid: none, flip, flip+randaug, flip+cutmix");
  sweep_cmd->add_option("--out", sweep_out, "Directory for sweep_<kind>.tsv");
  sweep_flags.attach(sweep_cmd);

  auto* export_cmd = app.add_subcommand("export-prompt", "Render a prompt as a PPM image");
  std::string export_checkpoint, export_out;
  export_cmd->add_option("--checkpoint", export_checkpoint)->required()->check(CLI::ExistingFile);
  export_cmd->add_option("--out", export_out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*train_cmd) return cmd_train(train_flags, quiet);
    if (*eval_cmd) return cmd_eval(checkpoint, baseline, split, eval_corruption, eval_flags);
    if (*map_cmd) return cmd_map_labels(map_flags, map_out);
    if (*sweep_cmd) return cmd_sweep(sweep_flags, sizes, norms, augment, sweep_out);
    if (*export_cmd) return cmd_export_prompt(export_checkpoint, export_out);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const NumericError& e) {
    const auto& d = e.diagnostic();
    std::cerr << "error [numeric]: " << e.what() << " (stage " << d.stage << ", " << d.nonfinite_count
              << " non-finite values)\n";
    return kNumericExit;
  } catch (const Error& e) {
    std::cerr << "error [" << to_string(e.kind()) << "]: " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const json::exception& e) {
    std::cerr << "error [config]: " << e.what() << '\n';
    return kConfigExit;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error [io]: " << e.what() << '\n';
    return kIoExit;
  }
  return kUsage;
}
