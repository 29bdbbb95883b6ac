#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "msr/errors.hpp"
#include "msr/prng.hpp"
#include "msr/tensor.hpp"

namespace msr {

constexpr std::size_t kCifarChannels = 3;
constexpr std::size_t kCifarImageSize = 32;
constexpr std::size_t kCifarRecordBytes = 1 + kCifarChannels * kCifarImageSize * kCifarImageSize;  // 3073
constexpr std::size_t kCifarClasses = 10;

/// One labelled image, channel-planar (all R, then G, then B), rows
/// contiguous within a plane.
struct ImageRecord {
  std::uint8_t label = 0;
  std::vector<std::uint8_t> pixels;

  friend bool operator==(const ImageRecord&, const ImageRecord&) = default;
};

struct Dataset {
  std::size_t image_size = kCifarImageSize;
  std::size_t num_classes = kCifarClasses;
  std::vector<ImageRecord> records;

  std::size_t size() const { return records.size(); }
  std::size_t pixels_per_image() const { return kCifarChannels * image_size * image_size; }
  std::size_t record_bytes() const { return 1 + pixels_per_image(); }
};

inline std::size_t record_bytes_for(std::size_t image_size) {
  return 1 + kCifarChannels * image_size * image_size;
}

/// Parses CIFAR-10 binary records: label byte followed by planar pixels.
/// Other square sizes use the same layout with 1 + 3*size*size bytes.
inline std::vector<ImageRecord> parse_cifar10(std::span<const std::uint8_t> bytes,
                                              std::size_t image_size = kCifarImageSize,
                                              std::size_t num_classes = kCifarClasses) {
  const std::size_t rec = record_bytes_for(image_size);
  if (bytes.size() % rec != 0) {
    throw DataError("parse_cifar10: buffer of " + std::to_string(bytes.size()) +
                    " bytes is not a multiple of the " + std::to_string(rec) + "-byte record; expected " +
                    std::to_string((bytes.size() / rec + 1) * rec) + " or " +
                    std::to_string(bytes.size() / rec * rec) + " bytes, trailing " +
                    std::to_string(bytes.size() % rec) + " bytes start at offset " +
                    std::to_string(bytes.size() / rec * rec));
  }
  std::vector<ImageRecord> out(bytes.size() / rec);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::uint8_t* r = bytes.data() + i * rec;
    if (r[0] >= num_classes) {
      throw DataError("parse_cifar10: record " + std::to_string(i) + " at offset " +
                      std::to_string(i * rec) + " has label " + std::to_string(r[0]) + " >= " +
                      std::to_string(num_classes));
    }
    out[i].label = r[0];
    out[i].pixels.assign(r + 1, r + rec);
  }
  return out;
}

inline std::vector<std::uint8_t> serialize_records(const std::vector<ImageRecord>& records) {
  std::vector<std::uint8_t> out;
  for (const auto& r : records) {
    out.push_back(r.label);
    out.insert(out.end(), r.pixels.begin(), r.pixels.end());
  }
  return out;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

/// Loads data_batch_1..5.bin (train) or test_batch.bin from a
/// cifar-10-batches-bin directory.
inline Dataset load_cifar10(const std::filesystem::path& dir, bool train) {
  Dataset ds;
  std::vector<std::string> files;
  if (train) {
    for (int i = 1; i <= 5; ++i) files.push_back("data_batch_" + std::to_string(i) + ".bin");
  } else {
    files.push_back("test_batch.bin");
  }
  for (const auto& f : files) {
    auto bytes = read_file_bytes(dir / f);
    auto recs = parse_cifar10(bytes);
    ds.records.insert(ds.records.end(), std::make_move_iterator(recs.begin()),
                      std::make_move_iterator(recs.end()));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Normalization: per-channel (x/255 - mean_c) / std_c with statistics from the
// training split.

struct ChannelStats {
  std::array<double, kCifarChannels> mean{0.0, 0.0, 0.0};
  std::array<double, kCifarChannels> std{1.0, 1.0, 1.0};
};

inline ChannelStats compute_channel_stats(const Dataset& ds) {
  ChannelStats s;
  if (ds.records.empty()) return s;
  const std::size_t plane = ds.image_size * ds.image_size;
  const double count = static_cast<double>(ds.records.size() * plane);
  for (std::size_t c = 0; c < kCifarChannels; ++c) {
    double acc = 0.0;
    for (const auto& r : ds.records)
      for (std::size_t k = 0; k < plane; ++k) acc += r.pixels[c * plane + k] / 255.0;
    const double mean = acc / count;
    double q = 0.0;
    for (const auto& r : ds.records)
      for (std::size_t k = 0; k < plane; ++k) {
        const double d = r.pixels[c * plane + k] / 255.0 - mean;
        q += d * d;
      }
    s.mean[c] = mean;
    s.std[c] = std::sqrt(q / count);
  }
  return s;
}

/// All records as one [N, 3, S, S] tensor.
inline Tensor<double> normalize(const Dataset& ds, const ChannelStats& stats) {
  for (double sd : stats.std) {
    if (!(sd > 0.0)) throw DataError("normalize: channel standard deviation is zero");
  }
  if (ds.records.empty()) throw DataError("normalize: empty dataset");
  const std::size_t S = ds.image_size, plane = S * S;
  Tensor<double> out({ds.records.size(), kCifarChannels, S, S});
  for (std::size_t n = 0; n < ds.records.size(); ++n) {
    const auto& px = ds.records[n].pixels;
    if (px.size() != ds.pixels_per_image()) throw DataError("normalize: record size mismatch");
    for (std::size_t c = 0; c < kCifarChannels; ++c)
      for (std::size_t k = 0; k < plane; ++k)
        out[(n * kCifarChannels + c) * plane + k] =
            (px[c * plane + k] / 255.0 - stats.mean[c]) / stats.std[c];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation on one normalized [C, S, S] image.

struct AugmentOptions {
  bool flip = true;
  std::size_t pad = 4;
  bool scale_jitter = false;  // random up-scale then crop instead of pad+crop
  double scale_max = 1.25;
};

/// The random choices of one augmentation, so tests can pin them.
struct AugmentDraw {
  bool flip = false;
  std::size_t offset_y = 0;  // crop origin in the padded (or rescaled) image
  std::size_t offset_x = 0;
  double scale = 1.0;

  /// No flip, centred crop: the identity for the pad+crop variant.
  static AugmentDraw identity(const AugmentOptions& o) { return {false, o.pad, o.pad, 1.0}; }
};

namespace detail {
inline std::size_t scaled_extent(std::size_t S, double scale) {
  return std::max<std::size_t>(S, static_cast<std::size_t>(std::lround(static_cast<double>(S) * scale)));
}
}  // namespace detail

inline AugmentDraw sample_augment(Prng& rng, const AugmentOptions& o, std::size_t S) {
  AugmentDraw d;
  d.flip = o.flip && rng.bernoulli(0.5);
  if (o.scale_jitter) {
    d.scale = rng.uniform(1.0, o.scale_max);
    const std::size_t big = detail::scaled_extent(S, d.scale);
    d.offset_y = rng.uniform_index(big - S + 1);
    d.offset_x = rng.uniform_index(big - S + 1);
  } else {
    d.offset_y = rng.uniform_index(2 * o.pad + 1);
    d.offset_x = rng.uniform_index(2 * o.pad + 1);
  }
  return d;
}

/// Horizontal flip, then either zero-pad by o.pad and crop S x S at the draw's
/// offset, or nearest-neighbour rescale by draw.scale and crop.
inline Tensor<double> augment(const Tensor<double>& image, const AugmentDraw& d, const AugmentOptions& o) {
  if (image.rank() != 3 || image.dim(1) != image.dim(2)) {
    throw std::invalid_argument("augment: expected [C,S,S], got " + shape_str(image.shape()));
  }
  const std::size_t C = image.dim(0), S = image.dim(1);
  auto src = [&](std::size_t c, std::size_t y, std::size_t x) {
    return image.at(c, y, d.flip ? S - 1 - x : x);
  };
  Tensor<double> out(image.shape());
  if (o.scale_jitter) {
    const std::size_t big = detail::scaled_extent(S, d.scale);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < S; ++y)
        for (std::size_t x = 0; x < S; ++x) {
          const std::size_t by = y + d.offset_y, bx = x + d.offset_x;
          const std::size_t sy = std::min(S - 1, by * S / big), sx = std::min(S - 1, bx * S / big);
          out.at(c, y, x) = src(c, sy, sx);
        }
    return out;
  }
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < S; ++y)
      for (std::size_t x = 0; x < S; ++x) {
        const long sy = static_cast<long>(y + d.offset_y) - static_cast<long>(o.pad);
        const long sx = static_cast<long>(x + d.offset_x) - static_cast<long>(o.pad);
        if (sy >= 0 && sx >= 0 && sy < static_cast<long>(S) && sx < static_cast<long>(S)) {
          out.at(c, y, x) = src(c, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
        }
      }
  return out;
}

inline Tensor<double> augment(const Tensor<double>& image, Prng& rng, const AugmentOptions& o) {
  return augment(image, sample_augment(rng, o, image.dim(1)), o);
}

// ---------------------------------------------------------------------------
// Batching

struct Batch {
  Tensor<double> images;  // [N, 3, S, S]
  std::vector<int> labels;
};

/// One epoch of index batches from a fresh Fisher-Yates shuffle. The last
/// partial batch is kept unless drop_last.
inline std::vector<std::vector<std::size_t>> batch_iter(std::size_t n, std::size_t batch_size, Prng& rng,
                                                        bool drop_last) {
  if (batch_size == 0) throw std::invalid_argument("batch_iter: batch_size must be >= 1");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.uniform_index(i)]);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    if (drop_last && end - start < batch_size) break;
    out.emplace_back(order.begin() + static_cast<long>(start), order.begin() + static_cast<long>(end));
  }
  return out;
}

/// Gathers `indices` from a normalized [N, C, S, S] tensor, optionally
/// augmenting each image with draws from `rng`.
inline Batch make_batch(const Tensor<double>& images, const std::vector<int>& labels,
                        const std::vector<std::size_t>& indices, const AugmentOptions* aug, Prng* rng) {
  const std::size_t C = images.dim(1), S = images.dim(2), per = C * S * S;
  Batch b{Tensor<double>({indices.size(), C, S, S}), {}};
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const double* src = images.raw() + indices[i] * per;
    if (aug && rng) {
      Tensor<double> img({C, S, S}, std::vector<double>(src, src + per));
      img = augment(img, *rng, *aug);
      std::copy(img.raw(), img.raw() + per, b.images.raw() + i * per);
    } else {
      std::copy(src, src + per, b.images.raw() + i * per);
    }
    b.labels.push_back(labels[indices[i]]);
  }
  return b;
}

/// Normalizes and gathers `indices` straight from uint8 records, so large
/// splits stay compact in memory. Same result as normalize() then make_batch().
inline Batch make_batch(const Dataset& ds, const ChannelStats& stats, const std::vector<std::size_t>& indices,
                        const AugmentOptions* aug, Prng* rng) {
  const std::size_t S = ds.image_size, plane = S * S, per = kCifarChannels * plane;
  Batch b{Tensor<double>({indices.size(), kCifarChannels, S, S}), {}};
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto& r = ds.records.at(indices[i]);
    if (r.pixels.size() != per) throw DataError("make_batch: record size mismatch");
    Tensor<double> img({kCifarChannels, S, S});
    for (std::size_t c = 0; c < kCifarChannels; ++c)
      for (std::size_t k = 0; k < plane; ++k)
        img[c * plane + k] = (r.pixels[c * plane + k] / 255.0 - stats.mean[c]) / stats.std[c];
    if (aug && rng) img = augment(img, *rng, *aug);
    std::copy(img.raw(), img.raw() + per, b.images.raw() + i * per);
    b.labels.push_back(r.label);
  }
  return b;
}

inline std::vector<int> labels_of(const Dataset& ds) {
  std::vector<int> out;
  out.reserve(ds.size());
  for (const auto& r : ds.records) out.push_back(r.label);
  return out;
}

// ---------------------------------------------------------------------------
// Procedural dataset for desk-scale runs.
//
// Class k of K: a sinusoidal grating at orientation pi*k/K with random phase,
// tinted by a class-specific colour, plus a Gaussian blob centred near a
// class-specific point on a circle, plus i.i.d. Gaussian pixel noise.
// Records interleave classes (0, 1, ..., K-1, 0, 1, ...).

inline Dataset gen_synthetic(std::size_t n_classes, std::size_t n_per_class, std::size_t size, Prng& rng) {
  if (n_classes == 0 || size == 0) throw std::invalid_argument("gen_synthetic: parameters must be positive");
  if (n_classes > 255) throw std::invalid_argument("gen_synthetic: at most 255 classes");
  Dataset ds;
  ds.image_size = size;
  ds.num_classes = n_classes;
  const double S = static_cast<double>(size);
  const double pi = std::numbers::pi;
  for (std::size_t i = 0; i < n_per_class; ++i) {
    for (std::size_t k = 0; k < n_classes; ++k) {
      const double theta = pi * static_cast<double>(k) / static_cast<double>(n_classes);
      const double freq = 2.0 * pi * (2.0 + static_cast<double>(k % 2)) / S;
      const double phase = rng.uniform(0.0, 2.0 * pi);
      const double ang = 2.0 * pi * static_cast<double>(k) / static_cast<double>(n_classes);
      const double cy = S * (0.5 + 0.25 * std::sin(ang)) + rng.uniform(-1.5, 1.5);
      const double cx = S * (0.5 + 0.25 * std::cos(ang)) + rng.uniform(-1.5, 1.5);
      const double sigma = S / 6.0;
      const double contrast = rng.uniform(0.7, 1.3);
      ImageRecord r;
      r.label = static_cast<std::uint8_t>(k);
      r.pixels.resize(kCifarChannels * size * size);
      for (std::size_t c = 0; c < kCifarChannels; ++c) {
        const double tint = 0.6 + 0.4 * std::cos(ang + 2.0 * pi * static_cast<double>(c) / 3.0);
        for (std::size_t y = 0; y < size; ++y) {
          for (std::size_t x = 0; x < size; ++x) {
            const double u = static_cast<double>(x) * std::cos(theta) + static_cast<double>(y) * std::sin(theta);
            const double grating = std::sin(freq * u + phase);
            const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
            const double blob = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
            const double v = 128.0 + contrast * (55.0 * tint * grating + 45.0 * blob) + 18.0 * rng.normal();
            r.pixels[(c * size + y) * size + x] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
          }
        }
      }
      ds.records.push_back(std::move(r));
    }
  }
  return ds;
}

}  // namespace msr
