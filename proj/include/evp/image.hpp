#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace evp {

// Dense height x width x channels tensor of doubles, channel-last row-major.
class Image {
 public:
  Image() = default;
  Image(int height, int width, int channels, double fill = 0.0);
  Image(int height, int width, int channels, std::vector<double> values);

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  int channels() const noexcept { return channels_; }
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  std::size_t index(int y, int x, int c) const noexcept {
    return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
  }
  double& at(int y, int x, int c) noexcept { return values_[index(y, x, c)]; }
  double at(int y, int x, int c) const noexcept { return values_[index(y, x, c)]; }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }

  bool same_shape(const Image& other) const noexcept {
    return height_ == other.height_ && width_ == other.width_ &&
           channels_ == other.channels_;
  }
  bool operator==(const Image& other) const = default;

  Image& operator+=(const Image& other);
  Image& operator*=(double scale);

  bool all_finite() const noexcept;
  double sum() const noexcept;

 private:
  int height_ = 0;
  int width_ = 0;
  int channels_ = 0;
  std::vector<double> values_;
};

// Copies the h x w block starting at (top, left).
Image crop(const Image& image, int top, int left, int h, int w);

}  // namespace evp
