#include "evp/image.hpp"

#include <cmath>
#include <numeric>
#include <string>

#include "evp/errors.hpp"

namespace evp {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidGeometry: return "invalid-geometry";
    case ErrorKind::kInvalidInput: return "invalid-input";
    case ErrorKind::kComposition: return "composition";
    case ErrorKind::kShape: return "shape";
    case ErrorKind::kConfig: return "config";
    case ErrorKind::kNumeric: return "numeric";
    case ErrorKind::kInvalidDataset: return "invalid-dataset";
    case ErrorKind::kCapacity: return "capacity";
    case ErrorKind::kIo: return "io";
  }
  return "unknown";
}

NumericError::NumericError(NumericDiagnostic diagnostic)
    : Error(ErrorKind::kNumeric,
            "non-finite value in " + diagnostic.stage + " (value=" +
                std::to_string(diagnostic.value) + ", nonfinite=" +
                std::to_string(diagnostic.nonfinite_count) + ")"),
      diagnostic_(std::move(diagnostic)) {}

Image::Image(int height, int width, int channels, double fill)
    : height_(height), width_(width), channels_(channels) {
  if (height < 0 || width < 0 || channels < 0) {
    throw Error(ErrorKind::kShape, "negative image dimension");
  }
  values_.assign(static_cast<std::size_t>(height) * width * channels, fill);
}

Image::Image(int height, int width, int channels, std::vector<double> values)
    : height_(height), width_(width), channels_(channels), values_(std::move(values)) {
  if (height < 0 || width < 0 || channels < 0 ||
      values_.size() != static_cast<std::size_t>(height) * width * channels) {
    throw Error(ErrorKind::kShape, "image buffer does not match its shape");
  }
}

Image& Image::operator+=(const Image& other) {
  if (!same_shape(other)) throw Error(ErrorKind::kShape, "image shape mismatch in +=");
  for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += other.values_[i];
  return *this;
}

Image& Image::operator*=(double scale) {
  for (double& v : values_) v *= scale;
  return *this;
}

bool Image::all_finite() const noexcept {
  for (double v : values_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

double Image::sum() const noexcept {
  return std::accumulate(values_.begin(), values_.end(), 0.0);
}

Image crop(const Image& image, int top, int left, int h, int w) {
  if (top < 0 || left < 0 || top + h > image.height() || left + w > image.width()) {
    throw Error(ErrorKind::kShape, "crop window outside image");
  }
  Image out(h, w, image.channels());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < image.channels(); ++c) {
        out.at(y, x, c) = image.at(top + y, left + x, c);
      }
    }
  }
  return out;
}

}  // namespace evp
