#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "evp/image.hpp"
#include "evp/tensor_file.hpp"

namespace evp {

enum class PromptMode {
  kShrinkPad,        // image shrunk to k x k, prompt fills the K x K border
  kOuterPadWithPe,   // native image padded outward; positional table resampled
  kOuterPadNoPe,     // native image padded outward; border patches get no PE
  kOverlayAdd,       // prompt added on top of the full image
};

enum class Interpolation { kBilinear, kArea };

std::string to_string(PromptMode mode);
PromptMode prompt_mode_from_string(const std::string& name);
std::string to_string(Interpolation interp);
Interpolation interpolation_from_string(const std::string& name);

// outer_size is the side of the composed input; inner_size the side of the
// image region inside it (k for shrink-pad, the native size for outer-pad).
struct PromptGeometry {
  int outer_size = 32;
  int inner_size = 24;
  int channels = 3;
  PromptMode mode = PromptMode::kShrinkPad;

  void validate() const;
  int offset() const noexcept { return (outer_size - inner_size) / 2; }
  bool operator==(const PromptGeometry&) const = default;
};

// Checks that a geometry can feed a backbone with the given native input
// size and patch size. Throws a composition error otherwise.
void check_backbone_fit(const PromptGeometry& geometry, int native_size, int patch_size);

// Outer size for an outer-pad geometry whose prompt-parameter count is
// closest to that of the shrink-pad geometry (native, shrink_inner). Pad width
// per side is a multiple of patch_size so image patches stay grid-aligned.
int matched_outer_size(int native_size, int patch_size, int shrink_inner, int channels);

class MaskMatrix {
 public:
  MaskMatrix() = default;
  explicit MaskMatrix(Image entries) : entries_(std::move(entries)) {}

  const Image& entries() const noexcept { return entries_; }
  int size() const noexcept { return entries_.height(); }
  int channels() const noexcept { return entries_.channels(); }
  double sum() const noexcept { return entries_.sum(); }

  // Elementwise product with the mask.
  Image apply(const Image& values) const;
  bool operator==(const MaskMatrix&) const = default;

 private:
  Image entries_;
};

// Ones everywhere except a zero k x k central block.
MaskMatrix make_mask(int outer, int inner, int channels);
MaskMatrix mask_for(const PromptGeometry& geometry);

std::size_t parameter_count(const PromptGeometry& geometry);

Image resize(const Image& image, int height, int width, Interpolation interp);
Image shrink(const Image& image, int size, Interpolation interp = Interpolation::kBilinear);

struct PromptTemplate {
  Image weights;
  MaskMatrix mask;
  PromptGeometry geometry;

  static PromptTemplate zeros(const PromptGeometry& geometry);
  static PromptTemplate gaussian(const PromptGeometry& geometry, std::uint64_t seed,
                                 double stddev = 0.02);

  // V_e = W masked to the prompt locations.
  Image effective() const { return mask.apply(weights); }
  void validate() const;
};

Image compose(const Image& image, const PromptTemplate& prompt,
              Interpolation interp = Interpolation::kBilinear);

// Chain rule through compose: dL/dW = dL/d(composed) masked.
Image prompt_gradient(const Image& composed_gradient, const PromptTemplate& prompt);

TensorFile prompt_to_tensor_file(const PromptTemplate& prompt, std::uint64_t seed);
PromptTemplate prompt_from_tensor_file(const TensorFile& file);

// Maps W masked into [0,1] pixels using per-channel mean/std; masked-out
// pixels are black. Only used for visualization.
Image prompt_visualization(const PromptTemplate& prompt, std::span<const double> mean,
                           std::span<const double> stddev);

}  // namespace evp
