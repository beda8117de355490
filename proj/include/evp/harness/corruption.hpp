#pragma once

#include <array>
#include <cstdint>

#include "evp/harness/config.hpp"
#include "evp/image.hpp"

namespace evp::harness {

// Severity tables, index 0..5. Severity 0 is the identity.
//   gaussian_noise: additive N(0, sigma^2) noise, sigma in [0,1] pixel units
//   blur:           Gaussian kernel standard deviation in pixels
//   contrast:       factor applied around the per-channel image mean
inline constexpr std::array<double, 6> kNoiseSigma{0.0, 0.04, 0.06, 0.08, 0.09, 0.10};
inline constexpr std::array<double, 6> kBlurSigma{0.0, 0.4, 0.6, 0.7, 0.8, 1.0};
inline constexpr std::array<double, 6> kContrastFactor{1.0, 0.75, 0.5, 0.4, 0.3, 0.15};

// Operates on raw [0,1] pixels and clips the result back to [0,1].
Image corrupt(const Image& image, CorruptionKind kind, int severity, std::uint64_t seed);

Image gaussian_blur(const Image& image, double sigma);

}  // namespace evp::harness
