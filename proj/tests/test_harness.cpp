#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "evp/errors.hpp"
#include "evp/harness/checkpoint.hpp"
#include "evp/harness/config.hpp"
#include "evp/harness/corruption.hpp"
#include "evp/harness/dataset.hpp"
#include "evp/harness/linear_probe.hpp"
#include "evp/harness/metrics.hpp"
#include "evp/harness/sweep.hpp"
#include "evp/harness/trainer.hpp"
#include "oracles.hpp"

using namespace evp;
using namespace evp::harness;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("evp_test_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Small enough to train in a couple of seconds.
RunConfig tiny_config(int classes = 2) {
  RunConfig c;
  c.backbone.native_size = 16;
  c.backbone.patch_size = 4;
  c.backbone.embed_dim = 16;
  c.backbone.depth = 2;
  c.backbone.heads = 2;
  c.backbone.mlp_dim = 32;
  c.backbone.feature_dim = 8;
  c.backbone.num_classes = classes;
  c.geometry = PromptGeometry{16, 12, 3, PromptMode::kShrinkPad};
  c.dataset.num_classes = classes;
  c.dataset.train_per_class = 20;
  c.dataset.eval_per_class = 20;
  c.learning_rate = 0.5;
  c.epochs = 2;
  c.batch_size = 8;
  return c;
}

}  // namespace

TEST_CASE("config requires learning rate, epochs and batch size") {
  RunConfig c = tiny_config();
  CHECK_NOTHROW(c.validate());
  c.learning_rate.reset();
  CHECK_THROWS_AS(c.validate(), Error);
  c = tiny_config();
  c.epochs.reset();
  CHECK_THROWS_AS(c.validate(), Error);
  c = tiny_config();
  c.batch_size.reset();
  CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("config json round trip and unknown keys") {
  RunConfig c = tiny_config(3);
  c.normalization.kind = NormKind::kL1;
  c.augmentation.cutmix = true;
  c.dataset.corruption = Corruption{CorruptionKind::kBlur, 2};
  c.tokens = {TokenPromptMode::kVpNT, 3, 5};
  c.mapping = MappingMode::kFrequency;
  c.seed = 99;
  const nlohmann::json j = to_json(c);
  const RunConfig back = merge_json(RunConfig{}, j);
  CHECK(to_json(back) == j);
  CHECK_FALSE(j.contains("output_dir"));

  CHECK_THROWS_AS(merge_json(c, nlohmann::json{{"optimiser", {}}}), Error);
  CHECK_THROWS_AS(merge_json(c, nlohmann::json{{"prompt", {{"size", 3}}}}), Error);
  CHECK_THROWS_AS(merge_json(c, nlohmann::json{{"optimizer", {{"normalization", "l3"}}}}), Error);
  CHECK(merge_json(c, nlohmann::json{{"prompt", {{"mode", "none"}}}}).geometry == std::nullopt);
}

TEST_CASE("config file with overrides") {
  const fs::path dir = scratch("cfg");
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "run.json");
    out << R"({"optimizer": {"learning_rate": 2.5}, "epochs": 3, "batch_size": 4})";
  }
  const RunConfig c = load_config_file(dir / "run.json");
  CHECK(*c.learning_rate == 2.5);
  CHECK(*c.epochs == 3);
  CHECK_THROWS_AS(load_config_file(dir / "missing.json"), Error);
  fs::remove_all(dir);
}

TEST_CASE("output root override applies to relative directories") {
  RunConfig c = tiny_config();
  c.output_dir = "runs/a";
  ::setenv("EVP_OUTPUT_ROOT", "/tmp/root", 1);
  CHECK(c.resolved_output_dir() == fs::path("/tmp/root/runs/a"));
  c.output_dir = "/abs/b";
  CHECK(c.resolved_output_dir() == fs::path("/abs/b"));
  ::unsetenv("EVP_OUTPUT_ROOT");
  c.output_dir = "runs/a";
  CHECK(c.resolved_output_dir() == fs::path("runs/a"));
}

TEST_CASE("synthetic data is seeded, balanced and in range") {
  DatasetSpec spec;
  spec.num_classes = 3;
  spec.train_per_class = 10;
  const Dataset a = make_synthetic(spec, 16, 3, false);
  const Dataset b = make_synthetic(spec, 16, 3, false);
  const Dataset e = make_synthetic(spec, 16, 3, true);
  REQUIRE(a.samples.size() == 30);
  CHECK(a.class_counts() == std::vector<int>{10, 10, 10});
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    CHECK(a.samples[i].image == b.samples[i].image);
    for (double v : a.samples[i].image.values()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
  CHECK_FALSE(a.samples[0].image == e.samples[0].image);
}

TEST_CASE("subsample counts") {
  DatasetSpec spec;
  spec.num_classes = 4;
  spec.train_per_class = 100;
  const Dataset full = make_synthetic(spec, 8, 3, false);
  const Dataset same = subsample(full, 1.0, 3);
  REQUIRE(same.samples.size() == full.samples.size());
  for (std::size_t i = 0; i < full.samples.size(); ++i) CHECK(same.samples[i].image == full.samples[i].image);

  CHECK(subsample(full, 0.1, 3).class_counts() == std::vector<int>{10, 10, 10, 10});
  CHECK(subsample(full, 0.01, 3).class_counts() == std::vector<int>{1, 1, 1, 1});
  CHECK(subsample(full, 0.07, 3).class_counts() == std::vector<int>{7, 7, 7, 7});
  CHECK(subsample(full, 0.333, 3).class_counts() == std::vector<int>{34, 34, 34, 34});

  const Dataset s1 = subsample(full, 0.1, 1);
  const Dataset s2 = subsample(full, 0.1, 2);
  CHECK(s1.class_counts() == s2.class_counts());
  bool differs = false;
  for (std::size_t i = 0; i < s1.samples.size(); ++i) differs |= !(s1.samples[i].image == s2.samples[i].image);
  CHECK(differs);

  CHECK_THROWS_AS(subsample(full, 0.0, 1), Error);
  CHECK_THROWS_AS(subsample(full, 1.5, 1), Error);
}

TEST_CASE("CIFAR binary records") {
  const fs::path dir = scratch("cifar");
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "data_batch_1.bin", std::ios::binary);
    for (int r = 0; r < 3; ++r) {
      out.put(static_cast<char>(r));
      for (int c = 0; c < 3; ++c) {
        for (int i = 0; i < 1024; ++i) out.put(static_cast<char>(c == r ? 255 : (i % 2) * 51));
      }
    }
  }
  const Dataset d = read_cifar_binary(dir, 3, 32);
  REQUIRE(d.samples.size() == 3);
  CHECK(d.samples[1].label == 1);
  CHECK(d.samples[1].image.at(0, 0, 1) == 1.0);
  CHECK(d.samples[1].image.at(0, 1, 0) == doctest::Approx(0.2));

  {
    std::ofstream bad(dir / "data_batch_2.bin", std::ios::binary);
    bad << "short";
  }
  CHECK_THROWS_AS(read_cifar_binary(dir, 3, 32), Error);
  CHECK_THROWS_AS(read_cifar_binary(dir / "none", 3, 32), Error);
  fs::remove_all(dir);
}

TEST_CASE("image folder ingestion") {
  const fs::path dir = scratch("folder");
  for (const char* cls : {"cat", "dog"}) {
    fs::create_directories(dir / cls);
    for (int i = 0; i < 2; ++i) {
      write_ppm(dir / cls / ("img" + std::to_string(i) + ".ppm"), Image(8, 8, 3, cls[0] == 'c' ? 0.2 : 0.8));
    }
  }
  const Dataset d = read_image_folder(dir, 16, 3);
  CHECK(d.num_classes == 2);
  CHECK(d.class_counts() == std::vector<int>{2, 2});
  CHECK(d.samples.front().image.height() == 16);
  CHECK(d.samples.front().image.at(3, 3, 0) == doctest::Approx(51.0 / 255.0));

  DatasetSpec spec;
  spec.source = DataSource::kImageFolder;
  spec.path = (dir / "missing").string();
  spec.num_classes = 2;
  try {
    load_dataset(spec, 16, 3, 0);
    FAIL("expected a dataset error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kInvalidDataset);
  }
  fs::remove_all(dir);
}

TEST_CASE("corruption severity zero is the identity") {
  const Image x = oracle::random_image(16, 16, 3, 1, 0.1);
  for (CorruptionKind k : {CorruptionKind::kGaussianNoise, CorruptionKind::kBlur, CorruptionKind::kContrast}) {
    CHECK(corrupt(x, k, 0, 5) == x);
    CHECK(corrupt(x, k, 3, 5) == corrupt(x, k, 3, 5));
  }
  CHECK_THROWS_AS(corrupt(x, CorruptionKind::kBlur, 6, 0), Error);
}

TEST_CASE("gaussian noise matches the sigma table within 5 percent") {
  const Image flat(100, 100, 1, 0.5);  // 10^4 pixels, far from the clip range
  for (int s = 1; s <= 5; ++s) {
    const Image y = corrupt(flat, CorruptionKind::kGaussianNoise, s, 11 + s);
    double sum = 0, sq = 0;
    for (double v : y.values()) {
      sum += v - 0.5;
      sq += (v - 0.5) * (v - 0.5);
    }
    const double n = static_cast<double>(y.size());
    const double sd = std::sqrt(sq / n - (sum / n) * (sum / n));
    CHECK(std::abs(sd - kNoiseSigma[s]) <= 0.05 * kNoiseSigma[s]);
  }
}

TEST_CASE("blur keeps constants; contrast shrinks toward the mean") {
  const Image flat(12, 12, 3, 0.3);
  for (int s = 1; s <= 5; ++s) {
    const Image b = corrupt(flat, CorruptionKind::kBlur, s, 0);
    for (double v : b.values()) CHECK(v == doctest::Approx(0.3).epsilon(1e-12));
  }
  Image half(1, 2, 1, std::vector<double>{0.0, 1.0});
  const Image c = corrupt(half, CorruptionKind::kContrast, 2, 0);
  CHECK(c.values()[0] == doctest::Approx(0.5 - 0.5 * kContrastFactor[2]));
  CHECK(c.values()[1] == doctest::Approx(0.5 + 0.5 * kContrastFactor[2]));
}

TEST_CASE("metrics writer and reader") {
  const fs::path dir = scratch("metrics");
  fs::create_directories(dir);
  {
    MetricsWriter w(dir, {{"note", "x"}});
    w.append({1, "train", 0.5, 0.75, 10, 1344, 1.25});
    w.append({1, "eval", 0.4, 0.8, 10, 1344, 0.5});
  }
  const MetricsFile f = read_metrics(dir / "metrics.jsonl");
  CHECK(f.header["note"] == "x");
  REQUIRE(f.records.size() == 2);
  CHECK(f.records[1].split == "eval");
  CHECK(f.records[1].top1 == 0.8);
  CHECK(slurp(dir / "metrics.jsonl").find("wall_time") == std::string::npos);
  CHECK(slurp(dir / "timing.jsonl").find("wall_time_s") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("zero epochs: initial prompt, empty metrics, valid checkpoint") {
  RunConfig c = tiny_config();
  c.epochs = 0;
  c.output_dir = scratch("zero").string();
  const TrainResult r = train(c);
  CHECK(r.steps == 0);
  CHECK(r.records.empty());
  CHECK(read_metrics(fs::path(c.output_dir) / "metrics.jsonl").records.empty());
  const Checkpoint ck = load_checkpoint(fs::path(c.output_dir) / "prompt.safetensors");
  const PromptTemplate init = PromptTemplate::gaussian(*c.geometry, 0, 0.02);
  CHECK(ck.state.pixel->geometry == init.geometry);
  CHECK(ck.state.pixel->weights == r.state.pixel->weights);
  fs::remove_all(c.output_dir);
}

TEST_CASE("two-class run lowers the training loss in 200 steps") {
  RunConfig c = tiny_config(2);
  c.epochs = 40;  // 40 samples / batch 8 = 5 steps per epoch
  c.max_steps = 200;
  TrainOptions o;
  o.write_outputs = false;
  o.evaluate_each_epoch = false;
  const Backbone b = make_backbone(c);
  const DatasetSplits data = load_dataset(c.dataset, 16, 3, subsample_seed(c));
  const PromptState init = initial_state(c, b, data.train);
  const double before = evaluate(b, init, data.train, c).loss;
  const TrainResult r = train(c, b, data, o);
  CHECK(r.steps == 200);
  CHECK(evaluate(b, r.state, data.train, c).loss < before);
  CHECK(r.checksum_before == r.checksum_after);
}

TEST_CASE("identical runs write identical bytes") {
  RunConfig c = tiny_config();
  c.augmentation.cutmix = true;
  c.augmentation.randaug = true;
  c.output_dir = scratch("det_a").string();
  train(c);
  RunConfig d = c;
  d.output_dir = scratch("det_b").string();
  train(d);
  for (const char* f : {"metrics.jsonl", "prompt.safetensors", "best.safetensors", "config.json",
                        "backbone.safetensors", "summary.txt"}) {
    CHECK_MESSAGE(slurp(fs::path(c.output_dir) / f) == slurp(fs::path(d.output_dir) / f), f);
  }
  fs::remove_all(c.output_dir);
  fs::remove_all(d.output_dir);
}

TEST_CASE("checkpoint round trip gives bit-identical logits") {
  RunConfig c = tiny_config();
  c.tokens = {TokenPromptMode::kDeep, 2, 1};
  c.mapping = MappingMode::kArbitrary;
  TrainOptions o;
  o.write_outputs = false;
  const TrainResult r = train(c, o);
  const Backbone b = make_backbone(c);
  const TensorFile f = parse_tensor_file(serialize_tensor_file(checkpoint_to_tensor_file(r.state, c, b.checksum())));
  const Checkpoint ck = checkpoint_from_tensor_file(f);
  CHECK(ck.backbone_checksum == checksum_hex(b.checksum()));
  CHECK(ck.state.mapping->assignment == r.state.mapping->assignment);
  const DatasetSplits data = load_dataset(c.dataset, 16, 3, subsample_seed(c));
  for (const auto& s : data.eval.samples) {
    const Image x = normalize(s.image, c.dataset.mean, c.dataset.stddev);
    CHECK(predict(b, ck.state, ck.config, x) == predict(b, r.state, c, x));
  }
}

TEST_CASE("evaluation details") {
  RunConfig c = tiny_config();
  TrainOptions o;
  o.write_outputs = false;
  const Backbone b = make_backbone(c);
  const DatasetSplits data = load_dataset(c.dataset, 16, 3, subsample_seed(c));
  const TrainResult r = train(c, b, data, o);

  SUBCASE("severity-0 corruption matches clean evaluation") {
    const MetricsRecord clean = evaluate(b, r.state, data.eval, c);
    const MetricsRecord zero = evaluate(b, r.state, data.eval, c, Corruption{CorruptionKind::kGaussianNoise, 0});
    CHECK(zero.top1 == clean.top1);
    CHECK(zero.loss == clean.loss);
  }
  SUBCASE("geometry that does not fit the backbone is a config error") {
    PromptState bad = r.state;
    bad.pixel = PromptTemplate::zeros({20, 12, 3, PromptMode::kShrinkPad});
    CHECK_THROWS_AS(evaluate(b, bad, data.eval, c), Error);
  }
  SUBCASE("mapping checksum is fixed during training") {
    RunConfig m = c;
    m.mapping = MappingMode::kFrequency;
    m.collision_policy = CollisionPolicy::kUniqueGreedy;
    const PromptState init = initial_state(m, b, data.train);
    const TrainResult mr = train(m, b, data, o);
    CHECK(mr.state.mapping->checksum() == init.mapping->checksum());
  }
}

TEST_CASE("post-training train accuracy is close to the last logged value") {
  RunConfig c = tiny_config();
  c.augmentation = AugmentationPolicy::identity();
  c.epochs = 6;
  c.schedule = Schedule::kCosineDecay;
  TrainOptions o;
  o.write_outputs = false;
  const Backbone b = make_backbone(c);
  const DatasetSplits data = load_dataset(c.dataset, 16, 3, subsample_seed(c));
  const TrainResult r = train(c, b, data, o);
  const MetricsRecord* last_train = nullptr;
  for (const auto& rec : r.records) {
    if (rec.split == "train") last_train = &rec;
  }
  REQUIRE(last_train != nullptr);
  const double acc = evaluate(b, r.state, data.train, c).top1;
  // The logged value is a running average over the last epoch's batches.
  CHECK(std::abs(acc - last_train->top1) <= 0.15);
}

TEST_CASE("baselines") {
  RunConfig c = tiny_config(2);
  const Backbone b = make_backbone(c);
  const DatasetSplits data = load_dataset(c.dataset, 16, 3, subsample_seed(c));
  const MetricsRecord zs = evaluate_zero_shot(b, data.eval, c.dataset);
  CHECK(zs.top1 >= 0.0);
  CHECK(zs.top1 <= 1.0);
  const LinearProbe probe = fit_linear_probe(b, data.train, c.dataset);
  CHECK(evaluate_linear_probe(b, probe, data.train, c.dataset).top1 >= 0.75);
}

TEST_CASE("sweep grids have the expected rows") {
  RunConfig c = tiny_config();
  c.epochs = 1;
  const SweepTable sizes = run_sweep(SweepKind::kImageSize, image_size_grid(c, {16, 14, 12, 10}));
  REQUIRE(sizes.rows.size() == 4);
  for (std::size_t i = 1; i < sizes.rows.size(); ++i) {
    CHECK(sizes.rows[i].prompt_params > sizes.rows[i - 1].prompt_params);
  }
  CHECK(sizes.rows[0].prompt_params == 0);

  const auto norms = normalization_grid(c, {NormKind::kNone, NormKind::kL1, NormKind::kLInf,
                                            NormKind::kL2Partial, NormKind::kL2Whole});
  CHECK(norms.size() == 5);
  CHECK(norms[3].label == "l2_partial");

  const auto aug = augmentation_grid(c);
  REQUIRE(aug.size() == 4);
  CHECK(aug[0].config.augmentation.is_identity());
  CHECK(aug[2].config.augmentation.randaug);
  CHECK(aug[3].config.augmentation.cutmix);

  // Pure function of the cells.
  const SweepTable again = run_sweep(SweepKind::kImageSize, image_size_grid(c, {16, 14, 12, 10}));
  CHECK(again.to_tsv() == sizes.to_tsv());
}
