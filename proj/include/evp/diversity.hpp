#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "evp/image.hpp"
#include "evp/loss.hpp"

namespace evp {

// Input-diversity policy applied to the (shrunk) image before the prompt is
// composed around it. Order is fixed: flip, then randaug_lite, then cutmix.
struct AugmentationPolicy {
  bool flip = true;
  bool randaug = false;
  double randaug_magnitude = 0.5;  // in [0, 1]
  int randaug_ops = 2;
  bool cutmix = false;
  double cutmix_alpha = 1.0;  // lambda ~ Beta(alpha, alpha)
  double cutmix_prob = 0.5;
  std::uint64_t seed = 0;

  static AugmentationPolicy identity() { return {false, false, 0.5, 2, false, 1.0, 0.5, 0}; }
  bool is_identity() const noexcept { return !flip && !randaug && !cutmix; }
  void validate() const;
  bool operator==(const AugmentationPolicy&) const = default;
};

struct LabeledImage {
  Image image;
  int label = 0;
};

struct AugmentedSample {
  Image image;
  std::vector<SoftTarget> targets;
};

Image flip(const Image& image);

struct CutmixBox {
  int top = 0;
  int left = 0;
  int height = 0;
  int width = 0;
};

struct CutmixResult {
  Image image;
  std::array<SoftTarget, 2> targets;
  CutmixBox box;
};

// Pastes `box` of image_b into image_a; the first weight is the exact
// fraction of image_a pixels that survive.
CutmixResult cutmix_box(const Image& image_a, int label_a, const Image& image_b, int label_b,
                        const CutmixBox& box);
// Box of relative area (1 - lambda), placed uniformly at random among the
// positions where it fits entirely inside the image.
CutmixResult cutmix(const Image& image_a, int label_a, const Image& image_b, int label_b,
                    double lambda, std::mt19937_64& rng);

// Reduced RandAugment: num_ops operations drawn uniformly from
// {brightness, contrast, translate, rotate}. At magnitude m the brightness
// shift is in [-m, m], the contrast factor in [1-m, 1+m], the translation up
// to m/4 of the side and the rotation up to 30*m degrees. Vacated pixels are 0.
Image randaug_lite(const Image& image, double magnitude, int num_ops, std::mt19937_64& rng);

Image adjust_brightness(const Image& image, double delta);
Image adjust_contrast(const Image& image, double factor);
Image translate(const Image& image, int dy, int dx);
Image rotate(const Image& image, double degrees);

// Augments a batch. `stream` distinguishes batches (e.g. the global step);
// outputs are a pure function of (batch, policy, stream).
std::vector<AugmentedSample> apply_policy(std::span<const LabeledImage> batch,
                                          const AugmentationPolicy& policy, std::uint64_t stream);

}  // namespace evp
