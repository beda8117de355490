#include "evp/harness/corruption.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "evp/diversity.hpp"
#include "evp/errors.hpp"

namespace evp::harness {

Image gaussian_blur(const Image& image, double sigma) {
  if (sigma <= 0.0) return image;
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(2 * radius + 1);
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    total += kernel[i + radius];
  }
  for (double& k : kernel) k /= total;

  // Separable pass with edge clamping, so constants stay constant.
  auto pass = [&](const Image& src, bool horizontal) {
    Image dst(src.height(), src.width(), src.channels());
    for (int y = 0; y < src.height(); ++y) {
      for (int x = 0; x < src.width(); ++x) {
        for (int c = 0; c < src.channels(); ++c) {
          double acc = 0.0;
          for (int i = -radius; i <= radius; ++i) {
            const int sy = horizontal ? y : std::clamp(y + i, 0, src.height() - 1);
            const int sx = horizontal ? std::clamp(x + i, 0, src.width() - 1) : x;
            acc += kernel[i + radius] * src.at(sy, sx, c);
          }
          dst.at(y, x, c) = acc;
        }
      }
    }
    return dst;
  };
  return pass(pass(image, true), false);
}

Image corrupt(const Image& image, CorruptionKind kind, int severity, std::uint64_t seed) {
  if (severity < 0 || severity > 5) throw Error(ErrorKind::kConfig, "corruption severity must be in 0..5");
  if (severity == 0) return image;
  Image out;
  switch (kind) {
    case CorruptionKind::kGaussianNoise: {
      out = image;
      std::mt19937_64 rng(seed);
      std::normal_distribution<double> noise(0.0, kNoiseSigma[severity]);
      for (double& v : out.values()) v += noise(rng);
      break;
    }
    case CorruptionKind::kBlur:
      out = gaussian_blur(image, kBlurSigma[severity]);
      break;
    case CorruptionKind::kContrast:
      out = adjust_contrast(image, kContrastFactor[severity]);
      break;
    default:
      throw Error(ErrorKind::kConfig, "unknown corruption kind");
  }
  for (double& v : out.values()) v = std::clamp(v, 0.0, 1.0);
  return out;
}

}  // namespace evp::harness
