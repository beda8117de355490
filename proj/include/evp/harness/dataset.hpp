#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "evp/diversity.hpp"
#include "evp/harness/config.hpp"
#include "evp/image.hpp"

namespace evp::harness {

// Images are stored in raw [0, 1] pixel space; normalization happens in the
// evaluation/training pipeline after any corruption.
struct Dataset {
  std::vector<LabeledImage> samples;
  int num_classes = 0;

  std::vector<int> class_counts() const;
};

struct DatasetSplits {
  Dataset train;
  Dataset eval;
};

// Both splits, resized to native_size and per-class subsampled (train only).
DatasetSplits load_dataset(const DatasetSpec& spec, int native_size, int channels,
                           std::uint64_t subsample_seed);

// Low-frequency class textures: each class owns a mean coefficient vector
// over a small cosine basis; samples draw coefficients around it (unit
// variance, so `margin` scales class separation) plus light pixel noise.
// Every texture has zero spatial mean, so all classes share the same
// average colour.
Dataset make_synthetic(const DatasetSpec& spec, int size, int channels, bool eval_split);

// Per class, keeps ceil(fraction * n_c) items chosen without replacement.
Dataset subsample(const Dataset& dataset, double fraction, std::uint64_t seed);

// 3073-byte records: one label byte, then 1024 R, 1024 G, 1024 B bytes.
Dataset read_cifar_binary(const std::filesystem::path& path, int num_classes, int native_size);
// One subdirectory per class (sorted by name), PPM/PGM images inside.
Dataset read_image_folder(const std::filesystem::path& root, int native_size, int channels);

Image read_pnm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Image& image);

Image normalize(const Image& image, std::span<const double> mean, std::span<const double> stddev);

}  // namespace evp::harness
