#include "evp/prompt_geometry.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <random>

#include <nlohmann/json.hpp>

#include "evp/errors.hpp"

namespace evp {

std::string to_string(PromptMode mode) {
  switch (mode) {
    case PromptMode::kShrinkPad: return "shrink_pad";
    case PromptMode::kOuterPadWithPe: return "outer_pad_with_pe";
    case PromptMode::kOuterPadNoPe: return "outer_pad_no_pe";
    case PromptMode::kOverlayAdd: return "overlay_add";
  }
  return "unknown";
}

PromptMode prompt_mode_from_string(const std::string& name) {
  for (auto mode : {PromptMode::kShrinkPad, PromptMode::kOuterPadWithPe,
                    PromptMode::kOuterPadNoPe, PromptMode::kOverlayAdd}) {
    if (to_string(mode) == name) return mode;
  }
  throw Error(ErrorKind::kConfig, "unknown prompt mode '" + name + "'");
}

std::string to_string(Interpolation interp) {
  return interp == Interpolation::kBilinear ? "bilinear" : "area";
}

Interpolation interpolation_from_string(const std::string& name) {
  if (name == "bilinear") return Interpolation::kBilinear;
  if (name == "area") return Interpolation::kArea;
  throw Error(ErrorKind::kConfig, "unknown interpolation '" + name + "'");
}

void PromptGeometry::validate() const {
  if (outer_size <= 0 || inner_size <= 0 || channels <= 0) {
    throw Error(ErrorKind::kInvalidGeometry, "prompt geometry sizes must be positive");
  }
  if (inner_size > outer_size) {
    throw Error(ErrorKind::kInvalidGeometry, "inner size exceeds outer size");
  }
  switch (mode) {
    case PromptMode::kShrinkPad:
      break;
    case PromptMode::kOverlayAdd:
      if (inner_size != outer_size) {
        throw Error(ErrorKind::kInvalidGeometry, "overlay prompts require inner == outer");
      }
      break;
    case PromptMode::kOuterPadWithPe:
    case PromptMode::kOuterPadNoPe:
      if (inner_size == outer_size || (outer_size - inner_size) % 2 != 0) {
        throw Error(ErrorKind::kInvalidGeometry,
                    "outer padding must add an even, nonzero number of pixels");
      }
      break;
  }
}

void check_backbone_fit(const PromptGeometry& geometry, int native_size, int patch_size) {
  geometry.validate();
  const bool outer = geometry.mode == PromptMode::kOuterPadWithPe ||
                     geometry.mode == PromptMode::kOuterPadNoPe;
  if (!outer && geometry.outer_size != native_size) {
    throw Error(ErrorKind::kComposition, "composed size " + std::to_string(geometry.outer_size) +
                                             " does not match backbone input " +
                                             std::to_string(native_size));
  }
  if (outer) {
    if (geometry.inner_size != native_size) {
      throw Error(ErrorKind::kComposition, "outer padding must wrap a native-size image");
    }
    if (geometry.outer_size % patch_size != 0) {
      throw Error(ErrorKind::kComposition, "padded size is not a multiple of the patch size");
    }
    if (geometry.mode == PromptMode::kOuterPadNoPe && geometry.offset() % patch_size != 0) {
      throw Error(ErrorKind::kComposition,
                  "pad width must be a multiple of the patch size when border patches carry no PE");
    }
  }
}

int matched_outer_size(int native_size, int patch_size, int shrink_inner, int channels) {
  const auto target = static_cast<long long>(parameter_count(
      {native_size, shrink_inner, channels, PromptMode::kShrinkPad}));
  int best = native_size + 2 * patch_size;
  long long best_diff = -1;
  for (int pad = patch_size;; pad += patch_size) {
    const long long outer = native_size + 2LL * pad;
    const long long count = (outer * outer - 1LL * native_size * native_size) * channels;
    const long long diff = std::llabs(count - target);
    if (best_diff < 0 || diff < best_diff) {
      best_diff = diff;
      best = static_cast<int>(outer);
    }
    if (count >= target) break;
  }
  return best;
}

Image MaskMatrix::apply(const Image& values) const {
  if (!values.same_shape(entries_)) throw Error(ErrorKind::kShape, "mask shape mismatch");
  Image out = values;
  auto o = out.values();
  auto m = entries_.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= m[i];
  return out;
}

MaskMatrix make_mask(int outer, int inner, int channels) {
  if (outer <= 0 || inner <= 0 || channels <= 0 || inner > outer) {
    throw Error(ErrorKind::kInvalidGeometry, "mask requires 0 < inner <= outer");
  }
  Image entries(outer, outer, channels, 1.0);
  const int off = (outer - inner) / 2;
  for (int y = off; y < off + inner; ++y) {
    for (int x = off; x < off + inner; ++x) {
      for (int c = 0; c < channels; ++c) entries.at(y, x, c) = 0.0;
    }
  }
  return MaskMatrix(std::move(entries));
}

MaskMatrix mask_for(const PromptGeometry& geometry) {
  geometry.validate();
  if (geometry.mode == PromptMode::kOverlayAdd) {
    return MaskMatrix(Image(geometry.outer_size, geometry.outer_size, geometry.channels, 1.0));
  }
  return make_mask(geometry.outer_size, geometry.inner_size, geometry.channels);
}

std::size_t parameter_count(const PromptGeometry& geometry) {
  geometry.validate();
  const auto outer = static_cast<std::size_t>(geometry.outer_size);
  const auto inner = static_cast<std::size_t>(geometry.inner_size);
  const auto c = static_cast<std::size_t>(geometry.channels);
  if (geometry.mode == PromptMode::kOverlayAdd) return outer * outer * c;
  return (outer * outer - inner * inner) * c;
}

namespace {

struct Tap {
  int lo;
  int hi;
  double w_hi;
};

// Half-pixel source coordinate, clamped to the valid range.
Tap bilinear_tap(int dst, int in, int out) {
  const double scale = static_cast<double>(in) / out;
  double src = (dst + 0.5) * scale - 0.5;
  src = std::clamp(src, 0.0, static_cast<double>(in - 1));
  const int lo = static_cast<int>(std::floor(src));
  const int hi = std::min(lo + 1, in - 1);
  return {lo, hi, src - lo};
}

// Overlap weights of [dst*s, (dst+1)*s) with each source cell.
std::vector<std::pair<int, double>> area_taps(int dst, int in, int out) {
  const double scale = static_cast<double>(in) / out;
  const double lo = dst * scale;
  const double hi = (dst + 1) * scale;
  std::vector<std::pair<int, double>> taps;
  for (int s = static_cast<int>(std::floor(lo)); s < in && s < hi; ++s) {
    const double overlap = std::min(hi, s + 1.0) - std::max(lo, static_cast<double>(s));
    if (overlap > 0.0) taps.emplace_back(s, overlap / scale);
  }
  return taps;
}

}  // namespace

Image resize(const Image& image, int height, int width, Interpolation interp) {
  if (image.empty()) throw Error(ErrorKind::kInvalidInput, "cannot resize an empty image");
  if (height < 1 || width < 1) throw Error(ErrorKind::kInvalidInput, "target size must be >= 1");
  if (image.height() == height && image.width() == width) return image;

  const int channels = image.channels();
  Image out(height, width, channels);
  if (interp == Interpolation::kBilinear) {
    for (int y = 0; y < height; ++y) {
      const Tap ty = bilinear_tap(y, image.height(), height);
      for (int x = 0; x < width; ++x) {
        const Tap tx = bilinear_tap(x, image.width(), width);
        for (int c = 0; c < channels; ++c) {
          const double top = (1.0 - tx.w_hi) * image.at(ty.lo, tx.lo, c) + tx.w_hi * image.at(ty.lo, tx.hi, c);
          const double bot = (1.0 - tx.w_hi) * image.at(ty.hi, tx.lo, c) + tx.w_hi * image.at(ty.hi, tx.hi, c);
          out.at(y, x, c) = (1.0 - ty.w_hi) * top + ty.w_hi * bot;
        }
      }
    }
    return out;
  }

  for (int y = 0; y < height; ++y) {
    const auto ys = area_taps(y, image.height(), height);
    for (int x = 0; x < width; ++x) {
      const auto xs = area_taps(x, image.width(), width);
      for (int c = 0; c < channels; ++c) {
        double acc = 0.0;
        for (auto [sy, wy] : ys) {
          for (auto [sx, wx] : xs) acc += wy * wx * image.at(sy, sx, c);
        }
        out.at(y, x, c) = acc;
      }
    }
  }
  return out;
}

Image shrink(const Image& image, int size, Interpolation interp) {
  return resize(image, size, size, interp);
}

PromptTemplate PromptTemplate::zeros(const PromptGeometry& geometry) {
  MaskMatrix mask = mask_for(geometry);
  return {Image(geometry.outer_size, geometry.outer_size, geometry.channels), std::move(mask),
          geometry};
}

PromptTemplate PromptTemplate::gaussian(const PromptGeometry& geometry, std::uint64_t seed,
                                        double stddev) {
  PromptTemplate p = zeros(geometry);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, stddev);
  for (double& v : p.weights.values()) v = normal(rng);
  return p;
}

void PromptTemplate::validate() const {
  geometry.validate();
  if (weights.height() != geometry.outer_size || weights.width() != geometry.outer_size ||
      weights.channels() != geometry.channels || !weights.same_shape(mask.entries())) {
    throw Error(ErrorKind::kShape, "prompt weights do not match geometry");
  }
}

Image compose(const Image& image, const PromptTemplate& prompt, Interpolation interp) {
  prompt.validate();
  const PromptGeometry& g = prompt.geometry;
  if (image.channels() != g.channels) {
    throw Error(ErrorKind::kComposition, "image channel count does not match prompt");
  }
  switch (g.mode) {
    case PromptMode::kOverlayAdd: {
      if (image.height() != g.outer_size || image.width() != g.outer_size) {
        throw Error(ErrorKind::kComposition, "overlay prompt size does not match image");
      }
      Image out = image;
      out += prompt.effective();
      return out;
    }
    case PromptMode::kShrinkPad:
    case PromptMode::kOuterPadWithPe:
    case PromptMode::kOuterPadNoPe: {
      const bool outer = g.mode != PromptMode::kShrinkPad;
      if (outer && (image.height() != g.inner_size || image.width() != g.inner_size)) {
        throw Error(ErrorKind::kComposition, "outer padding expects a native-size image");
      }
      const Image inner = outer ? image : shrink(image, g.inner_size, interp);
      Image out = prompt.effective();
      const int off = g.offset();
      for (int y = 0; y < g.inner_size; ++y) {
        for (int x = 0; x < g.inner_size; ++x) {
          for (int c = 0; c < g.channels; ++c) out.at(off + y, off + x, c) = inner.at(y, x, c);
        }
      }
      return out;
    }
  }
  throw Error(ErrorKind::kComposition, "unhandled prompt mode");
}

Image prompt_gradient(const Image& composed_gradient, const PromptTemplate& prompt) {
  return prompt.mask.apply(composed_gradient);
}

TensorFile prompt_to_tensor_file(const PromptTemplate& prompt, std::uint64_t seed) {
  prompt.validate();
  const auto& g = prompt.geometry;
  const std::vector<std::int64_t> shape{g.outer_size, g.outer_size, g.channels};
  TensorFile file;
  file.arrays["prompt.W"] = {shape, {prompt.weights.values().begin(), prompt.weights.values().end()}};
  file.arrays["prompt.mask"] = {shape, {prompt.mask.entries().values().begin(),
                                        prompt.mask.entries().values().end()}};
  file.metadata["geometry"] = nlohmann::json{{"outer_size", g.outer_size},
                                             {"inner_size", g.inner_size},
                                             {"channels", g.channels},
                                             {"mode", to_string(g.mode)}}
                                  .dump();
  file.metadata["seed"] = std::to_string(seed);
  return file;
}

PromptTemplate prompt_from_tensor_file(const TensorFile& file) {
  const auto meta = nlohmann::json::parse(file.require_meta("geometry"));
  PromptGeometry g;
  g.outer_size = meta.at("outer_size").get<int>();
  g.inner_size = meta.at("inner_size").get<int>();
  g.channels = meta.at("channels").get<int>();
  g.mode = prompt_mode_from_string(meta.at("mode").get<std::string>());
  g.validate();

  PromptTemplate p = PromptTemplate::zeros(g);
  const NamedArray& w = file.require("prompt.W");
  const NamedArray& m = file.require("prompt.mask");
  p.weights = Image(g.outer_size, g.outer_size, g.channels, w.values);
  MaskMatrix stored(Image(g.outer_size, g.outer_size, g.channels, m.values));
  if (!(stored == p.mask)) throw Error(ErrorKind::kConfig, "stored mask disagrees with geometry");
  return p;
}

Image prompt_visualization(const PromptTemplate& prompt, std::span<const double> mean,
                           std::span<const double> stddev) {
  const int channels = prompt.geometry.channels;
  if (static_cast<int>(mean.size()) != channels || static_cast<int>(stddev.size()) != channels) {
    throw Error(ErrorKind::kConfig, "normalization stats do not match channel count");
  }
  Image out = prompt.effective();
  const Image& m = prompt.mask.entries();
  for (int y = 0; y < out.height(); ++y) {
    for (int x = 0; x < out.width(); ++x) {
      for (int c = 0; c < channels; ++c) {
        double& v = out.at(y, x, c);
        v = m.at(y, x, c) == 0.0 ? 0.0 : std::clamp(v * stddev[c] + mean[c], 0.0, 1.0);
      }
    }
  }
  return out;
}

}  // namespace evp
