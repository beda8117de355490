#include "evp/harness/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>

#include "evp/errors.hpp"
#include "evp/prompt_geometry.hpp"

namespace evp::harness {

namespace fs = std::filesystem;

std::vector<int> Dataset::class_counts() const {
  std::vector<int> counts(num_classes, 0);
  for (const auto& s : samples) ++counts.at(s.label);
  return counts;
}

namespace {

constexpr int kMaxFrequency = 2;
constexpr double kTextureAmplitude = 0.04;
constexpr double kPixelNoise = 0.03;

struct Wave {
  int fy;
  int fx;
};

std::vector<Wave> texture_basis() {
  std::vector<Wave> basis;
  for (int fy = 0; fy <= kMaxFrequency; ++fy) {
    for (int fx = 0; fx <= kMaxFrequency; ++fx) {
      if (fx != 0 || fy != 0) basis.push_back({fy, fx});
    }
  }
  return basis;
}

}  // namespace

Dataset make_synthetic(const DatasetSpec& spec, int size, int channels, bool eval_split) {
  const auto basis = texture_basis();
  const std::size_t n_coef = basis.size() * channels;

  std::mt19937_64 proto_rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::vector<double>> prototypes(spec.num_classes, std::vector<double>(n_coef));
  for (auto& p : prototypes) {
    for (double& v : p) v = normal(proto_rng);
  }

  // Cosine tables, one per basis wave.
  std::vector<std::vector<double>> waves(basis.size(), std::vector<double>(size * size));
  for (std::size_t b = 0; b < basis.size(); ++b) {
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        waves[b][y * size + x] =
            std::cos(2.0 * M_PI * (basis[b].fx * x + basis[b].fy * y) / static_cast<double>(size));
      }
    }
  }

  std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                    eval_split ? 2u : 1u};
  std::mt19937_64 rng(seq);
  const int per_class = eval_split ? spec.eval_per_class : spec.train_per_class;

  Dataset out;
  out.num_classes = spec.num_classes;
  out.samples.reserve(static_cast<std::size_t>(per_class) * spec.num_classes);
  std::vector<double> z(n_coef);
  for (int c = 0; c < spec.num_classes; ++c) {
    for (int i = 0; i < per_class; ++i) {
      for (std::size_t k = 0; k < n_coef; ++k) z[k] = spec.margin * prototypes[c][k] + normal(rng);
      Image image(size, size, channels);
      for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
          for (int ch = 0; ch < channels; ++ch) {
            double v = 0.0;
            for (std::size_t b = 0; b < basis.size(); ++b) v += z[b * channels + ch] * waves[b][y * size + x];
            v = 0.5 + kTextureAmplitude * v + kPixelNoise * normal(rng);
            image.at(y, x, ch) = std::clamp(v, 0.0, 1.0);
          }
        }
      }
      out.samples.push_back({std::move(image), c});
    }
  }
  return out;
}

Dataset subsample(const Dataset& dataset, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw Error(ErrorKind::kConfig, "subset fraction must be in (0, 1]");
  }
  if (fraction == 1.0) return dataset;
  std::vector<std::vector<std::size_t>> by_class(dataset.num_classes);
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) by_class.at(dataset.samples[i].label).push_back(i);

  std::mt19937_64 rng(seed);
  std::vector<std::size_t> keep;
  for (auto& members : by_class) {
    const auto n = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(members.size()) - 1e-9));
    std::shuffle(members.begin(), members.end(), rng);
    members.resize(std::min(n, members.size()));
    std::sort(members.begin(), members.end());
    keep.insert(keep.end(), members.begin(), members.end());
  }
  std::sort(keep.begin(), keep.end());
  Dataset out;
  out.num_classes = dataset.num_classes;
  for (std::size_t i : keep) out.samples.push_back(dataset.samples[i]);
  return out;
}

Dataset read_cifar_binary(const fs::path& path, int num_classes, int native_size) {
  constexpr int kSide = 32;
  constexpr std::size_t kRecord = 1 + 3 * kSide * kSide;
  std::vector<fs::path> files;
  if (fs::is_directory(path)) {
    for (const auto& entry : fs::directory_iterator(path)) {
      if (entry.path().extension() == ".bin") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
  } else if (fs::exists(path)) {
    files.push_back(path);
  }
  if (files.empty()) throw Error(ErrorKind::kInvalidDataset, "no CIFAR binary data at '" + path.string() + "'");

  Dataset out;
  out.num_classes = num_classes;
  std::vector<unsigned char> record(kRecord);
  for (const auto& file : files) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw Error(ErrorKind::kInvalidDataset, "cannot open '" + file.string() + "'");
    const auto bytes = fs::file_size(file);
    if (bytes % kRecord != 0) {
      throw Error(ErrorKind::kInvalidDataset, "'" + file.string() + "' is not a whole number of 3073-byte records");
    }
    while (in.read(reinterpret_cast<char*>(record.data()), kRecord)) {
      const int label = record[0];
      if (label >= num_classes) {
        throw Error(ErrorKind::kInvalidDataset, "CIFAR label " + std::to_string(label) + " out of range");
      }
      Image image(kSide, kSide, 3);
      for (int c = 0; c < 3; ++c) {
        for (int p = 0; p < kSide * kSide; ++p) {
          image.at(p / kSide, p % kSide, c) = record[1 + c * kSide * kSide + p] / 255.0;
        }
      }
      out.samples.push_back({resize(image, native_size, native_size, Interpolation::kBilinear), label});
    }
  }
  return out;
}

namespace {

std::string next_token(std::istream& in) {
  std::string tok;
  while (in >> tok) {
    if (tok.front() == '#') {
      std::string rest;
      std::getline(in, rest);
      continue;
    }
    return tok;
  }
  throw Error(ErrorKind::kInvalidDataset, "truncated PNM header");
}

}  // namespace

Image read_pnm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kInvalidDataset, "cannot open image '" + path.string() + "'");
  const std::string magic = next_token(in);
  const int channels = (magic == "P6" || magic == "P3") ? 3 : (magic == "P5" || magic == "P2") ? 1 : 0;
  if (channels == 0) throw Error(ErrorKind::kInvalidDataset, "'" + path.string() + "' is not a PPM/PGM image");
  const int width = std::stoi(next_token(in));
  const int height = std::stoi(next_token(in));
  const int maxval = std::stoi(next_token(in));
  if (width < 1 || height < 1 || maxval < 1 || maxval > 255) {
    throw Error(ErrorKind::kInvalidDataset, "unsupported PNM header in '" + path.string() + "'");
  }
  Image image(height, width, channels);
  auto values = image.values();
  if (magic == "P6" || magic == "P5") {
    in.get();  // single whitespace byte after maxval
    std::vector<unsigned char> raw(values.size());
    if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
      throw Error(ErrorKind::kInvalidDataset, "truncated pixel data in '" + path.string() + "'");
    }
    for (std::size_t i = 0; i < raw.size(); ++i) values[i] = raw[i] / static_cast<double>(maxval);
  } else {
    for (double& v : values) v = std::stoi(next_token(in)) / static_cast<double>(maxval);
  }
  return image;
}

void write_ppm(const fs::path& path, const Image& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::kIo, "cannot write '" + path.string() + "'");
  const bool gray = image.channels() == 1;
  out << (gray ? "P5" : "P6") << '\n' << image.width() << ' ' << image.height() << "\n255\n";
  for (int y = 0; y < image.height(); ++y) {
    for (int x = 0; x < image.width(); ++x) {
      for (int c = 0; c < (gray ? 1 : 3); ++c) {
        const double v = image.at(y, x, std::min(c, image.channels() - 1));
        out.put(static_cast<char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
      }
    }
  }
}

Dataset read_image_folder(const fs::path& root, int native_size, int channels) {
  if (!fs::is_directory(root)) {
    throw Error(ErrorKind::kInvalidDataset, "image folder '" + root.string() + "' does not exist");
  }
  std::vector<fs::path> classes;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) classes.push_back(entry.path());
  }
  std::sort(classes.begin(), classes.end());
  if (classes.empty()) throw Error(ErrorKind::kInvalidDataset, "no class directories under '" + root.string() + "'");

  Dataset out;
  out.num_classes = static_cast<int>(classes.size());
  for (int label = 0; label < out.num_classes; ++label) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(classes[label])) {
      const auto ext = entry.path().extension().string();
      if (ext == ".ppm" || ext == ".pgm" || ext == ".pnm") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      Image image = read_pnm(f);
      if (image.channels() == 1 && channels == 3) {
        Image rgb(image.height(), image.width(), 3);
        for (int y = 0; y < image.height(); ++y) {
          for (int x = 0; x < image.width(); ++x) {
            for (int c = 0; c < 3; ++c) rgb.at(y, x, c) = image.at(y, x, 0);
          }
        }
        image = std::move(rgb);
      }
      if (image.channels() != channels) {
        throw Error(ErrorKind::kInvalidDataset, "'" + f.string() + "' has the wrong channel count");
      }
      out.samples.push_back({resize(image, native_size, native_size, Interpolation::kBilinear), label});
    }
  }
  return out;
}

DatasetSplits load_dataset(const DatasetSpec& spec, int native_size, int channels,
                           std::uint64_t subsample_seed) {
  spec.validate();
  DatasetSplits splits;
  switch (spec.source) {
    case DataSource::kSynthetic:
      splits.train = make_synthetic(spec, native_size, channels, false);
      splits.eval = make_synthetic(spec, native_size, channels, true);
      break;
    case DataSource::kCifarBinary:
      if (channels != 3) throw Error(ErrorKind::kConfig, "CIFAR data has three channels");
      if (spec.path.empty()) throw Error(ErrorKind::kInvalidDataset, "dataset.path is required for CIFAR data");
      splits.train = read_cifar_binary(spec.path, spec.num_classes, native_size);
      splits.eval = read_cifar_binary(spec.eval_path.empty() ? spec.path : spec.eval_path,
                                      spec.num_classes, native_size);
      break;
    case DataSource::kImageFolder:
      if (spec.path.empty()) throw Error(ErrorKind::kInvalidDataset, "dataset.path is required for image folders");
      splits.train = read_image_folder(spec.path, native_size, channels);
      splits.eval = read_image_folder(spec.eval_path.empty() ? spec.path : spec.eval_path,
                                      native_size, channels);
      if (splits.train.num_classes != spec.num_classes || splits.eval.num_classes != spec.num_classes) {
        throw Error(ErrorKind::kInvalidDataset, "image folder class count differs from dataset.num_classes");
      }
      break;
  }
  for (int n : splits.train.class_counts()) {
    if (n == 0) throw Error(ErrorKind::kInvalidDataset, "training split has an empty class");
  }
  splits.train = subsample(splits.train, spec.subset_fraction, subsample_seed);
  return splits;
}

Image normalize(const Image& image, std::span<const double> mean, std::span<const double> stddev) {
  if (static_cast<int>(mean.size()) != image.channels() || static_cast<int>(stddev.size()) != image.channels()) {
    throw Error(ErrorKind::kConfig, "normalization stats do not match channel count");
  }
  Image out = image;
  for (int y = 0; y < image.height(); ++y) {
    for (int x = 0; x < image.width(); ++x) {
      for (int c = 0; c < image.channels(); ++c) out.at(y, x, c) = (image.at(y, x, c) - mean[c]) / stddev[c];
    }
  }
  return out;
}

}  // namespace evp::harness
