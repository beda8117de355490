#include "evp/harness/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>

#include "evp/errors.hpp"

namespace evp::harness {

using json = nlohmann::json;

std::string to_string(DataSource source) {
  switch (source) {
    case DataSource::kSynthetic: return "synthetic";
    case DataSource::kImageFolder: return "image_folder";
    case DataSource::kCifarBinary: return "cifar_binary";
  }
  return "unknown";
}

std::string to_string(CorruptionKind kind) {
  switch (kind) {
    case CorruptionKind::kGaussianNoise: return "gaussian_noise";
    case CorruptionKind::kBlur: return "blur";
    case CorruptionKind::kContrast: return "contrast";
  }
  return "unknown";
}

std::string to_string(MappingMode mode) {
  switch (mode) {
    case MappingMode::kNone: return "none";
    case MappingMode::kFrequency: return "frequency";
    case MappingMode::kArbitrary: return "arbitrary";
  }
  return "unknown";
}

CorruptionKind corruption_kind_from_string(const std::string& name) {
  for (auto k : {CorruptionKind::kGaussianNoise, CorruptionKind::kBlur, CorruptionKind::kContrast}) {
    if (to_string(k) == name) return k;
  }
  throw Error(ErrorKind::kConfig, "unknown corruption '" + name + "'");
}

namespace {

DataSource data_source_from_string(const std::string& name) {
  for (auto s : {DataSource::kSynthetic, DataSource::kImageFolder, DataSource::kCifarBinary}) {
    if (to_string(s) == name) return s;
  }
  throw Error(ErrorKind::kConfig, "unknown dataset source '" + name + "'");
}

MappingMode mapping_mode_from_string(const std::string& name) {
  for (auto m : {MappingMode::kNone, MappingMode::kFrequency, MappingMode::kArbitrary}) {
    if (to_string(m) == name) return m;
  }
  throw Error(ErrorKind::kConfig, "unknown label mapping mode '" + name + "'");
}

// Reads keys from one JSON object and rejects any it was not asked about.
class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw Error(ErrorKind::kConfig, "'" + name_ + "' must be an object");
  }
  ~Section() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.contains(key)) {
        throw Error(ErrorKind::kConfig, "unknown key '" + name_ + "." + key + "'");
      }
    }
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw Error(ErrorKind::kConfig, "bad value for '" + name_ + "." + key + "': " + e.what());
    }
  }
  template <typename T>
  void read_optional(const char* key, std::optional<T>& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    if (j_.at(key).is_null()) {
      out.reset();
      return;
    }
    T v{};
    read(key, v);
    out = v;
  }
  template <typename E, typename F>
  void read_enum(const char* key, E& out, F parse) {
    std::string s;
    seen_.insert(key);
    if (!j_.contains(key)) return;
    read(key, s);
    out = parse(s);
  }
  bool has(const char* key) {
    seen_.insert(key);
    return j_.contains(key);
  }
  const json& at(const char* key) const { return j_.at(key); }

 private:
  const json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

}  // namespace

void DatasetSpec::validate() const {
  if (num_classes < 1) throw Error(ErrorKind::kConfig, "dataset needs at least one class");
  if (!(subset_fraction > 0.0 && subset_fraction <= 1.0)) {
    throw Error(ErrorKind::kConfig, "subset fraction must be in (0, 1]");
  }
  if (corruption && (corruption->severity < 0 || corruption->severity > 5)) {
    throw Error(ErrorKind::kConfig, "corruption severity must be in 0..5");
  }
  if (mean.size() != stddev.size() || mean.empty()) {
    throw Error(ErrorKind::kConfig, "normalization mean/std must have one entry per channel");
  }
  for (double s : stddev) {
    if (!(s > 0.0)) throw Error(ErrorKind::kConfig, "normalization std must be positive");
  }
  if (source == DataSource::kSynthetic && (train_per_class < 1 || eval_per_class < 1)) {
    throw Error(ErrorKind::kConfig, "synthetic split sizes must be positive");
  }
}

void RunConfig::validate() const {
  backbone.validate();
  if (!learning_rate) throw Error(ErrorKind::kConfig, "learning_rate is required");
  if (!epochs) throw Error(ErrorKind::kConfig, "epochs is required");
  if (!batch_size) throw Error(ErrorKind::kConfig, "batch_size is required");
  if (!(*learning_rate >= 0.0)) throw Error(ErrorKind::kConfig, "learning_rate must be >= 0");
  if (*epochs < 0) throw Error(ErrorKind::kConfig, "epochs must be >= 0");
  if (*batch_size < 1) throw Error(ErrorKind::kConfig, "batch_size must be >= 1");
  if (max_steps < 0) throw Error(ErrorKind::kConfig, "max_steps must be >= 0");
  if (!(prompt_init_std >= 0.0)) throw Error(ErrorKind::kConfig, "prompt_init_std must be >= 0");
  normalization.validate();
  augmentation.validate();
  dataset.validate();
  if (static_cast<int>(dataset.mean.size()) != backbone.channels) {
    throw Error(ErrorKind::kConfig, "normalization stats do not match backbone channels");
  }
  if (geometry) {
    if (geometry->channels != backbone.channels) {
      throw Error(ErrorKind::kConfig, "prompt channels do not match backbone channels");
    }
    check_backbone_fit(*geometry, backbone.native_size, backbone.patch_size);
  }
  if (tokens.mode != TokenPromptMode::kNone && tokens.num_prompts < 0) {
    throw Error(ErrorKind::kConfig, "num_prompts must be >= 0");
  }
  if (mapping == MappingMode::kNone) {
    if (backbone.num_classes != dataset.num_classes) {
      throw Error(ErrorKind::kConfig,
                  "head has " + std::to_string(backbone.num_classes) + " classes but dataset has " +
                      std::to_string(dataset.num_classes) + "; enable a label mapping");
    }
  } else if (dataset.num_classes > backbone.num_classes &&
             (mapping == MappingMode::kArbitrary ||
              collision_policy == CollisionPolicy::kUniqueGreedy)) {
    throw Error(ErrorKind::kCapacity, "more downstream classes than pretrained classes");
  }
}

std::filesystem::path RunConfig::resolved_output_dir() const {
  std::filesystem::path dir = output_dir.empty() ? std::filesystem::path("runs/default")
                                                 : std::filesystem::path(output_dir);
  if (const char* root = std::getenv("EVP_OUTPUT_ROOT"); root && *root && dir.is_relative()) {
    dir = std::filesystem::path(root) / dir;
  }
  return dir;
}

json to_json(const RunConfig& c) {
  json j;
  const BackboneConfig& b = c.backbone;
  j["backbone"] = {{"native_size", b.native_size}, {"patch_size", b.patch_size},
                   {"channels", b.channels},       {"embed_dim", b.embed_dim},
                   {"depth", b.depth},             {"heads", b.heads},
                   {"mlp_dim", b.mlp_dim},         {"feature_dim", b.feature_dim},
                   {"num_classes", b.num_classes}, {"head", to_string(b.head)},
                   {"logit_scale", b.logit_scale}, {"seed", b.seed},
                   {"path", c.backbone_path}};
  if (c.geometry) {
    j["prompt"] = {{"mode", to_string(c.geometry->mode)},
                   {"outer_size", c.geometry->outer_size},
                   {"inner_size", c.geometry->inner_size},
                   {"interpolation", to_string(c.interpolation)},
                   {"init_std", c.prompt_init_std}};
  } else {
    j["prompt"] = {{"mode", "none"},
                   {"interpolation", to_string(c.interpolation)},
                   {"init_std", c.prompt_init_std}};
  }
  j["tokens"] = {{"mode", to_string(c.tokens.mode)},
                 {"num_prompts", c.tokens.num_prompts},
                 {"position_index", c.tokens.position_index}};
  j["optimizer"] = {{"learning_rate", c.learning_rate ? json(*c.learning_rate) : json(nullptr)},
                    {"schedule", to_string(c.schedule)},
                    {"normalization", to_string(c.normalization.kind)},
                    {"epsilon", c.normalization.epsilon}};
  const AugmentationPolicy& a = c.augmentation;
  j["augmentation"] = {{"flip", a.flip},
                       {"randaug", a.randaug},
                       {"randaug_magnitude", a.randaug_magnitude},
                       {"randaug_ops", a.randaug_ops},
                       {"cutmix", a.cutmix},
                       {"cutmix_alpha", a.cutmix_alpha},
                       {"cutmix_prob", a.cutmix_prob}};
  const DatasetSpec& d = c.dataset;
  j["dataset"] = {{"source", to_string(d.source)},
                  {"path", d.path},
                  {"eval_path", d.eval_path},
                  {"num_classes", d.num_classes},
                  {"subset_fraction", d.subset_fraction},
                  {"corruption", d.corruption ? json{{"kind", to_string(d.corruption->kind)},
                                                     {"severity", d.corruption->severity}}
                                              : json(nullptr)},
                  {"train_per_class", d.train_per_class},
                  {"eval_per_class", d.eval_per_class},
                  {"margin", d.margin},
                  {"seed", d.seed},
                  {"mean", d.mean},
                  {"std", d.stddev}};
  j["label_mapping"] = {{"mode", to_string(c.mapping)}, {"policy", to_string(c.collision_policy)}};
  j["epochs"] = c.epochs ? json(*c.epochs) : json(nullptr);
  j["batch_size"] = c.batch_size ? json(*c.batch_size) : json(nullptr);
  j["max_steps"] = c.max_steps;
  j["seed"] = c.seed;
  return j;
}

RunConfig merge_json(const RunConfig& base, const json& j) {
  RunConfig c = base;
  Section top(j, "config");
  if (top.has("backbone")) {
    Section s(top.at("backbone"), "backbone");
    BackboneConfig& b = c.backbone;
    s.read("native_size", b.native_size);
    s.read("patch_size", b.patch_size);
    s.read("channels", b.channels);
    s.read("embed_dim", b.embed_dim);
    s.read("depth", b.depth);
    s.read("heads", b.heads);
    s.read("mlp_dim", b.mlp_dim);
    s.read("feature_dim", b.feature_dim);
    s.read("num_classes", b.num_classes);
    s.read_enum("head", b.head, head_kind_from_string);
    s.read("logit_scale", b.logit_scale);
    s.read("seed", b.seed);
    s.read("path", c.backbone_path);
  }
  if (top.has("prompt")) {
    Section s(top.at("prompt"), "prompt");
    if (s.has("mode")) {
      const auto mode = s.at("mode").get<std::string>();
      if (mode == "none") {
        c.geometry.reset();
      } else {
        if (!c.geometry) c.geometry = PromptGeometry{};
        c.geometry->mode = prompt_mode_from_string(mode);
      }
    }
    PromptGeometry g = c.geometry.value_or(PromptGeometry{});
    s.read("outer_size", g.outer_size);
    s.read("inner_size", g.inner_size);
    if (c.geometry) c.geometry = g;
    s.read_enum("interpolation", c.interpolation, interpolation_from_string);
    s.read("init_std", c.prompt_init_std);
  }
  if (c.geometry) c.geometry->channels = c.backbone.channels;
  if (top.has("tokens")) {
    Section s(top.at("tokens"), "tokens");
    s.read_enum("mode", c.tokens.mode, token_prompt_mode_from_string);
    s.read("num_prompts", c.tokens.num_prompts);
    s.read("position_index", c.tokens.position_index);
  }
  if (top.has("optimizer")) {
    Section s(top.at("optimizer"), "optimizer");
    s.read_optional("learning_rate", c.learning_rate);
    s.read_enum("schedule", c.schedule, schedule_from_string);
    s.read_enum("normalization", c.normalization.kind, norm_kind_from_string);
    s.read("epsilon", c.normalization.epsilon);
  }
  if (top.has("augmentation")) {
    Section s(top.at("augmentation"), "augmentation");
    AugmentationPolicy& a = c.augmentation;
    s.read("flip", a.flip);
    s.read("randaug", a.randaug);
    s.read("randaug_magnitude", a.randaug_magnitude);
    s.read("randaug_ops", a.randaug_ops);
    s.read("cutmix", a.cutmix);
    s.read("cutmix_alpha", a.cutmix_alpha);
    s.read("cutmix_prob", a.cutmix_prob);
  }
  if (top.has("dataset")) {
    Section s(top.at("dataset"), "dataset");
    DatasetSpec& d = c.dataset;
    s.read_enum("source", d.source, data_source_from_string);
    s.read("path", d.path);
    s.read("eval_path", d.eval_path);
    s.read("num_classes", d.num_classes);
    s.read("subset_fraction", d.subset_fraction);
    if (s.has("corruption")) {
      const json& cj = s.at("corruption");
      if (cj.is_null()) {
        d.corruption.reset();
      } else {
        Section cs(cj, "dataset.corruption");
        Corruption corr = d.corruption.value_or(Corruption{});
        cs.read_enum("kind", corr.kind, corruption_kind_from_string);
        cs.read("severity", corr.severity);
        d.corruption = corr;
      }
    }
    s.read("train_per_class", d.train_per_class);
    s.read("eval_per_class", d.eval_per_class);
    s.read("margin", d.margin);
    s.read("seed", d.seed);
    s.read("mean", d.mean);
    s.read("std", d.stddev);
  }
  if (top.has("label_mapping")) {
    Section s(top.at("label_mapping"), "label_mapping");
    s.read_enum("mode", c.mapping, mapping_mode_from_string);
    s.read_enum("policy", c.collision_policy, collision_policy_from_string);
  }
  top.read_optional("epochs", c.epochs);
  top.read_optional("batch_size", c.batch_size);
  top.read("max_steps", c.max_steps);
  top.read("seed", c.seed);
  top.read("output_dir", c.output_dir);
  return c;
}

RunConfig load_config_file(const std::filesystem::path& path, const RunConfig& base) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kConfig, "cannot read config file '" + path.string() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::kConfig, "config file '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return merge_json(base, j);
}

}  // namespace evp::harness
