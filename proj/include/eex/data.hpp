#pragma once
// Datasets: IDX and CIFAR-10 binary readers plus a seeded synthetic generator.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "eex/tensor.hpp"

namespace eex {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
/// Wrong magic number or impossible file size.
class FormatError : public DataError {
 public:
  using DataError::DataError;
};
/// File ends before the header says it should.
class TruncatedError : public DataError {
 public:
  using DataError::DataError;
};
/// Companion files or declared dimensions disagree.
class MismatchError : public DataError {
 public:
  using DataError::DataError;
};

struct Dataset {
  Tensor<float> images;  // [count, C, H, W], values in [0, 1]
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;
  std::string split = "train";

  std::size_t size() const noexcept { return labels.size(); }
  bool empty() const noexcept { return labels.empty(); }

  Shape sample_shape() const {
    const auto& s = images.shape();
    return Shape(s.begin() + 1, s.end());
  }

  Tensor<float> image(std::size_t i) const {
    const Shape s = sample_shape();
    const std::size_t n = shape_numel(s);
    auto begin = images.data().begin() + static_cast<std::ptrdiff_t>(i * n);
    return Tensor<float>(s, std::vector<float>(begin, begin + static_cast<std::ptrdiff_t>(n)));
  }

  Dataset subset(const std::vector<std::size_t>& idx, std::string tag) const {
    if (idx.empty()) throw DataError("empty subset");
    const Shape s = sample_shape();
    const std::size_t n = shape_numel(s);
    std::vector<float> data;
    data.reserve(idx.size() * n);
    Dataset d;
    for (auto i : idx) {
      auto begin = images.data().begin() + static_cast<std::ptrdiff_t>(i * n);
      data.insert(data.end(), begin, begin + static_cast<std::ptrdiff_t>(n));
      d.labels.push_back(labels.at(i));
    }
    Shape full{idx.size()};
    full.insert(full.end(), s.begin(), s.end());
    d.images = Tensor<float>(full, std::move(data));
    d.num_classes = num_classes;
    d.split = std::move(tag);
    return d;
  }

  /// Deterministic shuffle, then the trailing `fraction` becomes the second
  /// dataset.
  std::pair<Dataset, Dataset> split_off(double fraction, std::uint64_t seed, std::string first_tag,
                                        std::string second_tag) const {
    std::vector<std::size_t> idx(size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto held = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(size())));
    if (held == 0 || held >= size()) throw DataError("split fraction leaves an empty side");
    std::vector<std::size_t> a(idx.begin(), idx.end() - static_cast<std::ptrdiff_t>(held));
    std::vector<std::size_t> b(idx.end() - static_cast<std::ptrdiff_t>(held), idx.end());
    return {subset(a, std::move(first_tag)), subset(b, std::move(second_tag))};
  }

  void validate() const {
    if (empty()) throw DataError("dataset is empty");
    if (images.rank() != 4 || images.dim(0) != labels.size())
      throw MismatchError("image tensor " + shape_str(images.shape()) + " does not match " +
                          std::to_string(labels.size()) + " labels");
    for (auto l : labels)
      if (l >= num_classes) throw MismatchError("label " + std::to_string(l) + " >= class count");
  }
};

namespace detail {
inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

inline std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}
}  // namespace detail

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

/// IDX3 unsigned-byte image file as [count, 1, rows, cols] scaled to [0, 1].
inline Tensor<float> load_idx_images(const std::filesystem::path& path) {
  const auto b = detail::read_file(path);
  if (b.size() < 16) throw TruncatedError(path.string() + ": header needs 16 bytes");
  if (detail::be32(b, 0) != kIdxImageMagic) throw FormatError(path.string() + ": bad IDX image magic");
  const std::size_t n = detail::be32(b, 4), rows = detail::be32(b, 8), cols = detail::be32(b, 12);
  if (n == 0 || rows == 0 || cols == 0) throw FormatError(path.string() + ": zero dimension");
  const std::size_t need = 16 + n * rows * cols;
  if (b.size() < need) throw TruncatedError(path.string() + ": expected " + std::to_string(need) + " bytes");
  if (b.size() > need) throw MismatchError(path.string() + ": trailing bytes after declared images");
  std::vector<float> px(n * rows * cols);
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<float>(b[16 + i]) / 255.0f;
  return Tensor<float>({n, 1, rows, cols}, std::move(px));
}

inline std::vector<std::size_t> load_idx_labels(const std::filesystem::path& path) {
  const auto b = detail::read_file(path);
  if (b.size() < 8) throw TruncatedError(path.string() + ": header needs 8 bytes");
  if (detail::be32(b, 0) != kIdxLabelMagic) throw FormatError(path.string() + ": bad IDX label magic");
  const std::size_t n = detail::be32(b, 4);
  if (b.size() < 8 + n) throw TruncatedError(path.string() + ": expected " + std::to_string(8 + n) + " bytes");
  if (b.size() > 8 + n) throw MismatchError(path.string() + ": trailing bytes after declared labels");
  return std::vector<std::size_t>(b.begin() + 8, b.end());
}

/// Image and label IDX pair. `num_classes` 0 means max label + 1.
inline Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                        std::size_t num_classes = 0) {
  Dataset d;
  d.images = load_idx_images(images);
  d.labels = load_idx_labels(labels);
  if (d.images.dim(0) != d.labels.size())
    throw MismatchError("IDX image count " + std::to_string(d.images.dim(0)) + " != label count " +
                        std::to_string(d.labels.size()));
  const std::size_t top = *std::max_element(d.labels.begin(), d.labels.end());
  d.num_classes = num_classes ? num_classes : std::max<std::size_t>(2, top + 1);
  d.validate();
  return d;
}

inline constexpr std::size_t kCifarRecord = 3073;

/// CIFAR-10 binary batch: 1 label byte then 3x32x32 channel-major pixels.
inline Dataset load_cifar_binary(const std::filesystem::path& path) {
  const auto b = detail::read_file(path);
  if (b.empty()) throw FormatError(path.string() + ": empty file");
  if (b.size() % kCifarRecord != 0)
    throw FormatError(path.string() + ": size " + std::to_string(b.size()) + " is not a multiple of 3073");
  const std::size_t n = b.size() / kCifarRecord;
  std::vector<float> px(n * 3072);
  Dataset d;
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t off = i * kCifarRecord;
    d.labels[i] = b[off];
    for (std::size_t j = 0; j < 3072; ++j) px[i * 3072 + j] = static_cast<float>(b[off + 1 + j]) / 255.0f;
  }
  d.images = Tensor<float>({n, 3, 32, 32}, std::move(px));
  d.num_classes = 10;
  d.validate();
  return d;
}

/// Gaussian-blob images. Every class owns a prototype of three blobs placed
/// from `seed`; a sample is its prototype with jittered blob centres, blended
/// with a random other class by up to 0.5 * difficulty, plus pixel noise.
/// Labels cycle 0, 1, ..., M-1 so classes are balanced.
inline Dataset synth_dataset(std::uint64_t seed, std::size_t num_classes, std::size_t count, double difficulty,
                             Shape sample_shape = {1, 16, 16}) {
  if (num_classes < 2) throw ContractError("synthetic data needs at least 2 classes");
  if (count == 0) throw ContractError("synthetic data needs count > 0");
  if (sample_shape.size() != 3) throw ContractError("sample shape must be [C,H,W]");
  difficulty = std::clamp(difficulty, 0.0, 1.0);
  const std::size_t ch = sample_shape[0], h = sample_shape[1], w = sample_shape[2];

  struct Blob {
    std::size_t channel;
    double cy, cx, sigma, amp;
  };
  std::mt19937_64 proto_rng(seed * 0x9E3779B97F4A7C15ull + 1);
  std::uniform_real_distribution<double> uy(1.5, static_cast<double>(h) - 2.5);
  std::uniform_real_distribution<double> ux(1.5, static_cast<double>(w) - 2.5);
  std::uniform_real_distribution<double> us(1.0, 2.2);
  std::uniform_real_distribution<double> ua(0.7, 1.0);
  std::uniform_int_distribution<std::size_t> uc(0, ch - 1);
  std::vector<std::vector<Blob>> protos(num_classes);
  for (auto& p : protos)
    for (int k = 0; k < 3; ++k) p.push_back({uc(proto_rng), uy(proto_rng), ux(proto_rng), us(proto_rng), ua(proto_rng)});

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> jitter(0.0, 0.3 + 0.7 * difficulty);
  std::normal_distribution<double> noise(0.0, 0.04 + 0.16 * difficulty);
  std::uniform_real_distribution<double> mix(0.0, 0.5 * difficulty);
  std::uniform_int_distribution<std::size_t> other_class(1, num_classes - 1);

  auto render = [&](const std::vector<Blob>& blobs, double weight, std::vector<double>& img) {
    for (const auto& b : blobs) {
      const double cy = b.cy + jitter(rng), cx = b.cx + jitter(rng);
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
          img[(b.channel * h + y) * w + x] += weight * b.amp * std::exp(-(dy * dy + dx * dx) / (2 * b.sigma * b.sigma));
        }
    }
  };

  const std::size_t n = ch * h * w;
  std::vector<float> px(count * n);
  Dataset d;
  d.labels.resize(count);
  std::vector<double> img(n);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t label = i % num_classes;
    d.labels[i] = label;
    std::fill(img.begin(), img.end(), 0.0);
    const double lambda = mix(rng);
    const std::size_t other = (label + other_class(rng)) % num_classes;
    render(protos[label], 1.0 - lambda, img);
    render(protos[other], lambda, img);
    for (std::size_t j = 0; j < n; ++j) px[i * n + j] = static_cast<float>(std::clamp(img[j] + noise(rng), 0.0, 1.0));
  }
  Shape full{count};
  full.insert(full.end(), sample_shape.begin(), sample_shape.end());
  d.images = Tensor<float>(full, std::move(px));
  d.num_classes = num_classes;
  d.split = "synthetic";
  return d;
}

}  // namespace eex
