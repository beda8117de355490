#include "evp/diversity.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "evp/errors.hpp"

namespace evp {

namespace {

std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

double sample_beta(double alpha, std::mt19937_64& rng) {
  std::gamma_distribution<double> gamma(alpha, 1.0);
  const double x = gamma(rng);
  const double y = gamma(rng);
  return (x + y) > 0.0 ? x / (x + y) : 0.5;
}

}  // namespace

void AugmentationPolicy::validate() const {
  if (randaug_magnitude < 0.0 || randaug_magnitude > 1.0) {
    throw Error(ErrorKind::kConfig, "randaug magnitude must be in [0, 1]");
  }
  if (randaug_ops < 0) throw Error(ErrorKind::kConfig, "randaug op count must be >= 0");
  if (!(cutmix_alpha > 0.0)) throw Error(ErrorKind::kConfig, "cutmix alpha must be positive");
  if (cutmix_prob < 0.0 || cutmix_prob > 1.0) {
    throw Error(ErrorKind::kConfig, "cutmix probability must be in [0, 1]");
  }
}

Image flip(const Image& image) {
  Image out(image.height(), image.width(), image.channels());
  const int w = image.width();
  for (int y = 0; y < image.height(); ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < image.channels(); ++c) out.at(y, x, c) = image.at(y, w - 1 - x, c);
    }
  }
  return out;
}

CutmixResult cutmix_box(const Image& image_a, int label_a, const Image& image_b, int label_b,
                        const CutmixBox& box) {
  if (!image_a.same_shape(image_b)) throw Error(ErrorKind::kInvalidInput, "cutmix shape mismatch");
  if (box.height < 0 || box.width < 0 || box.top < 0 || box.left < 0 ||
      box.top + box.height > image_a.height() || box.left + box.width > image_a.width()) {
    throw Error(ErrorKind::kInvalidInput, "cutmix box outside image");
  }
  CutmixResult out{image_a, {}, box};
  for (int y = box.top; y < box.top + box.height; ++y) {
    for (int x = box.left; x < box.left + box.width; ++x) {
      for (int c = 0; c < image_a.channels(); ++c) out.image.at(y, x, c) = image_b.at(y, x, c);
    }
  }
  const long total = static_cast<long>(image_a.height()) * image_a.width();
  const long pasted = static_cast<long>(box.height) * box.width;
  const double kept = static_cast<double>(total - pasted) / static_cast<double>(total);
  out.targets = {SoftTarget{label_a, kept}, SoftTarget{label_b, 1.0 - kept}};
  return out;
}

CutmixResult cutmix(const Image& image_a, int label_a, const Image& image_b, int label_b,
                    double lambda, std::mt19937_64& rng) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw Error(ErrorKind::kInvalidInput, "lambda must be in [0, 1]");
  if (!image_a.same_shape(image_b)) throw Error(ErrorKind::kInvalidInput, "cutmix shape mismatch");
  const double side = std::sqrt(1.0 - lambda);
  CutmixBox box;
  box.height = static_cast<int>(std::lround(side * image_a.height()));
  box.width = static_cast<int>(std::lround(side * image_a.width()));
  std::uniform_int_distribution<int> top(0, image_a.height() - box.height);
  std::uniform_int_distribution<int> left(0, image_a.width() - box.width);
  box.top = top(rng);
  box.left = left(rng);
  return cutmix_box(image_a, label_a, image_b, label_b, box);
}

Image adjust_brightness(const Image& image, double delta) {
  Image out = image;
  for (double& v : out.values()) v += delta;
  return out;
}

Image adjust_contrast(const Image& image, double factor) {
  Image out = image;
  const int ch = image.channels();
  const double n = static_cast<double>(image.height()) * image.width();
  for (int c = 0; c < ch; ++c) {
    double mean = 0.0;
    for (int y = 0; y < image.height(); ++y) {
      for (int x = 0; x < image.width(); ++x) mean += image.at(y, x, c);
    }
    mean /= n;
    for (int y = 0; y < image.height(); ++y) {
      for (int x = 0; x < image.width(); ++x) {
        out.at(y, x, c) = mean + factor * (image.at(y, x, c) - mean);
      }
    }
  }
  return out;
}

Image translate(const Image& image, int dy, int dx) {
  Image out(image.height(), image.width(), image.channels());
  for (int y = 0; y < image.height(); ++y) {
    const int sy = y - dy;
    if (sy < 0 || sy >= image.height()) continue;
    for (int x = 0; x < image.width(); ++x) {
      const int sx = x - dx;
      if (sx < 0 || sx >= image.width()) continue;
      for (int c = 0; c < image.channels(); ++c) out.at(y, x, c) = image.at(sy, sx, c);
    }
  }
  return out;
}

Image rotate(const Image& image, double degrees) {
  const double theta = degrees * M_PI / 180.0;
  const double cs = std::cos(theta);
  const double sn = std::sin(theta);
  const double cy = (image.height() - 1) / 2.0;
  const double cx = (image.width() - 1) / 2.0;
  Image out(image.height(), image.width(), image.channels());
  auto sample = [&](int y, int x, int c) {
    if (y < 0 || y >= image.height() || x < 0 || x >= image.width()) return 0.0;
    return image.at(y, x, c);
  };
  for (int y = 0; y < image.height(); ++y) {
    for (int x = 0; x < image.width(); ++x) {
      // Inverse map from output to source coordinates.
      const double sy = cs * (y - cy) - sn * (x - cx) + cy;
      const double sx = sn * (y - cy) + cs * (x - cx) + cx;
      const int y0 = static_cast<int>(std::floor(sy));
      const int x0 = static_cast<int>(std::floor(sx));
      const double wy = sy - y0;
      const double wx = sx - x0;
      for (int c = 0; c < image.channels(); ++c) {
        out.at(y, x, c) = (1 - wy) * ((1 - wx) * sample(y0, x0, c) + wx * sample(y0, x0 + 1, c)) +
                          wy * ((1 - wx) * sample(y0 + 1, x0, c) + wx * sample(y0 + 1, x0 + 1, c));
      }
    }
  }
  return out;
}

Image randaug_lite(const Image& image, double magnitude, int num_ops, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> pick(0, 3);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  Image out = image;
  for (int i = 0; i < num_ops; ++i) {
    const int op = pick(rng);
    const double u = unit(rng) * magnitude;
    switch (op) {
      case 0: out = adjust_brightness(out, u); break;
      case 1: out = adjust_contrast(out, 1.0 + u); break;
      case 2: {
        const double u2 = unit(rng) * magnitude;
        out = translate(out, static_cast<int>(std::lround(u * 0.25 * out.height())),
                        static_cast<int>(std::lround(u2 * 0.25 * out.width())));
        break;
      }
      default: out = rotate(out, 30.0 * u); break;
    }
  }
  return out;
}

std::vector<AugmentedSample> apply_policy(std::span<const LabeledImage> batch,
                                          const AugmentationPolicy& policy, std::uint64_t stream) {
  policy.validate();
  std::vector<AugmentedSample> out;
  out.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    AugmentedSample s{batch[i].image, {SoftTarget{batch[i].label, 1.0}}};
    if (policy.is_identity()) {
      out.push_back(std::move(s));
      continue;
    }
    auto rng = make_rng(policy.seed, stream, i);
    std::bernoulli_distribution coin(0.5);
    if (policy.flip && coin(rng)) s.image = flip(s.image);
    if (policy.randaug) s.image = randaug_lite(s.image, policy.randaug_magnitude, policy.randaug_ops, rng);
    out.push_back(std::move(s));
  }

  if (policy.cutmix && batch.size() > 1) {
    // Partners come from the flipped/randaug'd batch, via a seeded permutation.
    auto rng = make_rng(policy.seed, stream, batch.size());
    std::vector<std::size_t> partner(batch.size());
    std::iota(partner.begin(), partner.end(), 0);
    std::shuffle(partner.begin(), partner.end(), rng);
    const std::vector<AugmentedSample> sources = out;
    std::bernoulli_distribution apply(policy.cutmix_prob);
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (!apply(rng)) continue;
      const std::size_t j = partner[i];
      if (j == i) continue;
      const double lambda = sample_beta(policy.cutmix_alpha, rng);
      CutmixResult mixed = cutmix(sources[i].image, batch[i].label, sources[j].image,
                                  batch[j].label, lambda, rng);
      out[i].image = std::move(mixed.image);
      out[i].targets.assign(mixed.targets.begin(), mixed.targets.end());
    }
  }
  return out;
}

}  // namespace evp
