#include "evp/harness/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "evp/diversity.hpp"
#include "evp/errors.hpp"
#include "evp/harness/checkpoint.hpp"
#include "evp/harness/corruption.hpp"
#include "evp/optimizer.hpp"

namespace evp::harness {

namespace fs = std::filesystem;

namespace {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t purpose, std::uint64_t index = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(purpose), static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32)};
  std::mt19937_64 rng(seq);
  return rng();
}

enum Purpose : std::uint64_t {
  kPromptInit = 1,
  kTokenInit = 2,
  kShuffle = 3,
  kAugment = 4,
  kSubsample = 5,
  kArbitraryMap = 6,
  kCorruption = 7,
};

int primary_label(const std::vector<SoftTarget>& targets) {
  const SoftTarget* best = &targets.front();
  for (const auto& t : targets) {
    if (t.weight > best->weight) best = &t;
  }
  return best->label;
}

int argmax(const Vector& v) {
  Eigen::Index i = 0;
  v.maxCoeff(&i);
  return static_cast<int>(i);
}

PositionalMode pe_mode(const PromptState& state) {
  return positional_mode_for(state.pixel ? &state.pixel->geometry : nullptr);
}

// Loss on downstream logits, optionally routed through a label mapping.
LogitLoss make_loss(const PromptState& state, std::span<const SoftTarget> targets) {
  return [&state, targets](const Vector& logits, Vector& dlogits) {
    if (!state.mapping) {
      LossValue v = cross_entropy(logits, targets);
      dlogits = std::move(v.dlogits);
      return v.loss;
    }
    LossValue v = cross_entropy(remap_logits(logits, *state.mapping), targets);
    dlogits = remap_gradient(v.dlogits, *state.mapping, static_cast<int>(logits.size()));
    return v.loss;
  };
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) {
    throw Error(ErrorKind::kIo, "cannot create output directory '" + dir.string() + "'");
  }
  const fs::path probe = dir / ".write_probe";
  {
    std::ofstream out(probe);
    if (!out) throw Error(ErrorKind::kIo, "output directory '" + dir.string() + "' is not writable");
  }
  fs::remove(probe, ec);
}

}  // namespace

std::size_t PromptState::parameter_count() const {
  std::size_t n = pixel ? evp::parameter_count(pixel->geometry) : 0;
  for (const Matrix& t : tokens.tokens) n += static_cast<std::size_t>(t.size());
  return n;
}

std::uint64_t subsample_seed(const RunConfig& config) { return derive_seed(config.seed, kSubsample); }

Backbone make_backbone(const RunConfig& config) {
  if (config.backbone_path.empty()) return Backbone::create(config.backbone);
  Backbone b = Backbone::from_tensor_file(read_tensor_file(config.backbone_path));
  if (!(b.config() == config.backbone)) {
    throw Error(ErrorKind::kConfig, "backbone file architecture differs from the run config");
  }
  return b;
}

PromptState initial_state(const RunConfig& config, const Backbone& backbone, const Dataset& train) {
  PromptState state;
  if (config.geometry) {
    state.pixel = PromptTemplate::gaussian(*config.geometry, derive_seed(config.seed, kPromptInit),
                                           config.prompt_init_std);
  }
  if (config.tokens.mode != TokenPromptMode::kNone) {
    state.tokens = TokenPrompts::gaussian(config.tokens.mode, config.tokens.num_prompts,
                                          config.tokens.position_index, backbone.config(),
                                          derive_seed(config.seed, kTokenInit), config.prompt_init_std);
  }
  switch (config.mapping) {
    case MappingMode::kNone:
      break;
    case MappingMode::kArbitrary:
      state.mapping = arbitrary_mapping(config.dataset.num_classes, backbone.config().num_classes,
                                        derive_seed(config.seed, kArbitraryMap));
      break;
    case MappingMode::kFrequency: {
      // Promptless pass over the normalized training images.
      std::vector<LabeledImage> normalized;
      normalized.reserve(train.samples.size());
      for (const auto& s : train.samples) {
        normalized.push_back({normalize(s.image, config.dataset.mean, config.dataset.stddev), s.label});
      }
      state.mapping = build_mapping(backbone, normalized, config.dataset.num_classes,
                                    config.collision_policy);
      break;
    }
  }
  return state;
}

Image prepare_input(const Image& normalized, const PromptState& state, const RunConfig& config) {
  if (!state.pixel) return normalized;
  return compose(normalized, *state.pixel, config.interpolation);
}

Vector predict(const Backbone& backbone, const PromptState& state, const RunConfig& config,
               const Image& normalized) {
  const Vector logits =
      backbone.forward(prepare_input(normalized, state, config), state.tokens, pe_mode(state));
  return state.mapping ? remap_logits(logits, *state.mapping) : logits;
}

MetricsRecord evaluate(const Backbone& backbone, const PromptState& state, const Dataset& dataset,
                       const RunConfig& config, std::optional<Corruption> corruption, int epoch) {
  if (state.pixel) {
    check_backbone_fit(state.pixel->geometry, backbone.config().native_size,
                       backbone.config().patch_size);
  }
  const auto start = std::chrono::steady_clock::now();
  MetricsRecord r;
  r.epoch = epoch;
  r.split = "eval";
  r.prompt_params = state.parameter_count();
  long correct = 0;
  double loss = 0.0;
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    const auto& s = dataset.samples[i];
    Image raw = s.image;
    if (corruption) raw = corrupt(raw, corruption->kind, corruption->severity, derive_seed(config.seed, kCorruption, i));
    const Vector logits = predict(backbone, state, config,
                                  normalize(raw, config.dataset.mean, config.dataset.stddev));
    loss += cross_entropy(logits, s.label).loss;
    correct += argmax(logits) == s.label ? 1 : 0;
  }
  const double n = std::max<std::size_t>(dataset.samples.size(), 1);
  r.loss = loss / n;
  r.top1 = correct / n;
  r.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

TrainResult train(const RunConfig& config, const TrainOptions& options) {
  config.validate();
  const Backbone backbone = make_backbone(config);
  const DatasetSplits data =
      load_dataset(config.dataset, backbone.config().native_size, backbone.config().channels,
                   subsample_seed(config));
  return train(config, backbone, data, options);
}

TrainResult train(const RunConfig& config, const Backbone& backbone, const DatasetSplits& data,
                  const TrainOptions& options) {
  config.validate();
  if (data.train.samples.empty()) throw Error(ErrorKind::kInvalidDataset, "training split is empty");
  const auto run_start = std::chrono::steady_clock::now();

  TrainResult result;
  result.checksum_before = backbone.checksum();
  result.state = initial_state(config, backbone, data.train);
  PromptState& state = result.state;
  const PositionalMode pos_mode = pe_mode(state);

  fs::path dir;
  std::optional<MetricsWriter> writer;
  if (options.write_outputs) {
    dir = config.resolved_output_dir();
    ensure_dir(dir);
    result.output_dir = dir;
    nlohmann::json cfg = to_json(config);
    {
      std::ofstream out(dir / "config.json");
      out << cfg.dump(2) << '\n';
    }
    write_tensor_file(dir / "backbone.safetensors", backbone.to_tensor_file());
    if (state.mapping) write_mapping_table(dir / "label_mapping.tsv", *state.mapping);
    writer.emplace(dir, nlohmann::json{{"config", cfg},
                                       {"backbone_checksum", checksum_hex(result.checksum_before)}});
  }

  // Normalize once; shrink-pad inputs are also shrunk once so augmentation
  // sees the k x k image.
  std::vector<LabeledImage> inputs;
  inputs.reserve(data.train.samples.size());
  for (const auto& s : data.train.samples) {
    Image x = normalize(s.image, config.dataset.mean, config.dataset.stddev);
    if (state.pixel && state.pixel->geometry.mode == PromptMode::kShrinkPad) {
      x = shrink(x, state.pixel->geometry.inner_size, config.interpolation);
    }
    inputs.push_back({std::move(x), s.label});
  }

  const int batch = *config.batch_size;
  const long steps_per_epoch = (static_cast<long>(inputs.size()) + batch - 1) / batch;
  long planned = steps_per_epoch * *config.epochs;
  if (config.max_steps > 0) planned = std::min(planned, config.max_steps);

  UpdateRule rule;
  rule.learning_rate = *config.learning_rate;
  rule.schedule = config.schedule;
  rule.normalization = config.normalization;
  rule.total_steps = std::max(planned, 1L);

  AugmentationPolicy policy = config.augmentation;
  policy.seed = derive_seed(config.seed, kAugment);

  double best_top1 = -1.0;
  auto save_best = [&](double top1) {
    if (!options.write_outputs || top1 <= best_top1) return;
    best_top1 = top1;
    save_checkpoint(dir / "best.safetensors", state, config, result.checksum_before);
  };
  auto emit = [&](const MetricsRecord& r) {
    result.records.push_back(r);
    if (writer) writer->append(r);
    if (options.on_record) options.on_record(r);
  };
  save_best(0.0);

  long step_index = 0;
  std::vector<std::size_t> order(inputs.size());
  for (int epoch = 1; epoch <= *config.epochs && step_index < planned; ++epoch) {
    const auto epoch_start = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 shuffle_rng(derive_seed(config.seed, kShuffle, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double epoch_loss = 0.0;
    long epoch_correct = 0;
    long epoch_seen = 0;
    for (std::size_t begin = 0; begin < order.size() && step_index < planned; begin += batch) {
      const std::size_t end = std::min(order.size(), begin + batch);
      std::vector<LabeledImage> chunk;
      for (std::size_t i = begin; i < end; ++i) chunk.push_back(inputs[order[i]]);
      const auto augmented = apply_policy(chunk, policy, static_cast<std::uint64_t>(step_index));

      const double inv_b = 1.0 / static_cast<double>(augmented.size());
      std::optional<Image> grad_sum;
      std::vector<Matrix> token_sum;
      double batch_loss = 0.0;
      for (const AugmentedSample& s : augmented) {
        const Image composed = prepare_input(s.image, state, config);
        const BackboneGradient g =
            backbone.gradient(composed, state.tokens, pos_mode, make_loss(state, s.targets));
        batch_loss += g.loss;
        const Vector downstream = state.mapping ? remap_logits(g.logits, *state.mapping) : g.logits;
        epoch_correct += argmax(downstream) == primary_label(s.targets) ? 1 : 0;
        if (state.pixel) {
          if (!grad_sum) {
            grad_sum = g.image_grad;
          } else {
            *grad_sum += g.image_grad;
          }
        }
        if (token_sum.empty()) {
          token_sum = g.token_grads;
        } else {
          for (std::size_t b = 0; b < token_sum.size(); ++b) token_sum[b] += g.token_grads[b];
        }
      }
      // Batch-mean gradient, then one update.
      if (state.pixel) {
        *grad_sum *= inv_b;
        step(*state.pixel, *grad_sum, rule, step_index);
      }
      if (state.tokens.mode != TokenPromptMode::kNone) {
        for (Matrix& t : token_sum) t *= inv_b;
        step_tokens(state.tokens, token_sum, rule, step_index);
      }
      epoch_loss += batch_loss;
      epoch_seen += static_cast<long>(augmented.size());
      result.step_losses.push_back(batch_loss * inv_b);
      ++step_index;
    }

    MetricsRecord train_record;
    train_record.epoch = epoch;
    train_record.split = "train";
    train_record.loss = epoch_loss / std::max(epoch_seen, 1L);
    train_record.top1 = static_cast<double>(epoch_correct) / std::max(epoch_seen, 1L);
    train_record.steps = step_index;
    train_record.prompt_params = state.parameter_count();
    train_record.wall_time_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start).count();
    emit(train_record);

    if (options.evaluate_each_epoch) {
      MetricsRecord eval_record = evaluate(backbone, state, data.eval, config, config.dataset.corruption, epoch);
      eval_record.steps = step_index;
      emit(eval_record);
      save_best(eval_record.top1);
    }
  }
  result.steps = step_index;

  result.checksum_after = backbone.checksum();
  if (result.checksum_after != result.checksum_before) {
    throw Error(ErrorKind::kConfig, "backbone weights changed during training");
  }
  if (options.write_outputs) {
    save_checkpoint(dir / "prompt.safetensors", state, config, result.checksum_before);
    std::ofstream summary(dir / "summary.txt");
    summary << summary_table(result.records);
    std::ofstream timing(dir / "timing.jsonl", std::ios::app);
    timing << nlohmann::json{{"total_wall_time_s",
                              std::chrono::duration<double>(std::chrono::steady_clock::now() - run_start).count()}}
                  .dump()
           << '\n';
  }
  return result;
}

}  // namespace evp::harness
