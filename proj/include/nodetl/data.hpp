#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "nodetl/binio.hpp"
#include "nodetl/errors.hpp"
#include "nodetl/random.hpp"
#include "nodetl/tensor.hpp"

namespace nodetl {

inline constexpr std::size_t kCifarPixels = 3072;
inline constexpr std::size_t kCifarRecord = kCifarPixels + 1;
inline constexpr std::size_t kCifarClasses = 10;

// Raw CIFAR-10 images: each image is 1024 red, 1024 green, then 1024 blue bytes.
struct ImageSet {
  std::vector<std::uint8_t> pixels;  // N * 3072
  std::vector<std::uint8_t> labels;  // N

  std::size_t size() const noexcept { return labels.size(); }
  std::span<const std::uint8_t> image(std::size_t i) const {
    return std::span<const std::uint8_t>(pixels).subspan(i * kCifarPixels, kCifarPixels);
  }
};

struct Dataset {
  Tensor features;                    // [N x d]
  std::vector<std::uint8_t> labels;   // N, or empty for unlabeled feature files
  std::size_t class_count = kCifarClasses;

  std::size_t size() const { return features.dim(0); }
  std::size_t dim() const { return features.dim(1); }
  bool has_labels() const { return !labels.empty() || size() == 0; }
};

inline ImageSet parse_cifar10(const std::vector<unsigned char>& bytes) {
  if (bytes.size() % kCifarRecord != 0) {
    const std::size_t offset = bytes.size() - bytes.size() % kCifarRecord;
    throw FormatError("truncated CIFAR-10 file: partial record of " +
                          std::to_string(bytes.size() % kCifarRecord) + " bytes at offset " +
                          std::to_string(offset),
                      offset);
  }
  const std::size_t n = bytes.size() / kCifarRecord;
  ImageSet set;
  set.labels.resize(n);
  set.pixels.resize(n * kCifarPixels);
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* rec = bytes.data() + i * kCifarRecord;
    if (rec[0] >= kCifarClasses) {
      throw DataError("CIFAR-10 label " + std::to_string(rec[0]) + " out of range in record " +
                      std::to_string(i) + " (offset " + std::to_string(i * kCifarRecord) + ")");
    }
    set.labels[i] = rec[0];
    std::copy(rec + 1, rec + kCifarRecord, set.pixels.begin() + static_cast<std::ptrdiff_t>(i * kCifarPixels));
  }
  return set;
}

inline ImageSet load_cifar10_bin(const std::string& path) {
  return parse_cifar10(binio::read_file(path));
}

inline void append(ImageSet& dst, const ImageSet& src) {
  dst.pixels.insert(dst.pixels.end(), src.pixels.begin(), src.pixels.end());
  dst.labels.insert(dst.labels.end(), src.labels.begin(), src.labels.end());
}

// Frozen stand-in for a pretrained backbone: a seeded projection with
// orthonormal rows followed by tanh. Never trained.
class FrozenExtractor {
 public:
  FrozenExtractor(std::uint64_t seed, std::size_t d) : seed_(seed), projection_({d, kCifarPixels}) {
    if (d == 0 || d > kCifarPixels) throw ContractError("extractor: need 1 <= d <= 3072");
    Rng rng(seed);
    for (double& v : projection_.span()) v = rng.normal();
    // Modified Gram-Schmidt, two passes for orthogonality at the 1e-10 level.
    auto P = projection_.span();
    for (std::size_t r = 0; r < d; ++r) {
      double* row = P.data() + r * kCifarPixels;
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t q = 0; q < r; ++q) {
          const double* prev = P.data() + q * kCifarPixels;
          double dot = 0.0;
          for (std::size_t j = 0; j < kCifarPixels; ++j) dot += row[j] * prev[j];
          for (std::size_t j = 0; j < kCifarPixels; ++j) row[j] -= dot * prev[j];
        }
      }
      double norm = 0.0;
      for (std::size_t j = 0; j < kCifarPixels; ++j) norm += row[j] * row[j];
      norm = std::sqrt(norm);
      for (std::size_t j = 0; j < kCifarPixels; ++j) row[j] /= norm;
    }
  }

  std::uint64_t seed() const noexcept { return seed_; }
  std::size_t dim() const { return projection_.dim(0); }
  const Tensor& projection() const noexcept { return projection_; }

  // pixel / 255, minus the per-image mean.
  static std::vector<double> normalize(std::span<const std::uint8_t> image) {
    std::vector<double> x(image.size());
    double mean = 0.0;
    for (std::size_t j = 0; j < image.size(); ++j) {
      x[j] = static_cast<double>(image[j]) / 255.0;
      mean += x[j];
    }
    mean /= static_cast<double>(image.size());
    for (double& v : x) v -= mean;
    return x;
  }

 private:
  std::uint64_t seed_;
  Tensor projection_;
};

inline Dataset extract_features(const FrozenExtractor& ex, const ImageSet& images) {
  const std::size_t n = images.size(), d = ex.dim();
  Dataset ds{Tensor({n, d}), images.labels, kCifarClasses};
  const auto P = ex.projection().span();
  for (std::size_t i = 0; i < n; ++i) {
    const std::vector<double> x = FrozenExtractor::normalize(images.image(i));
    for (std::size_t r = 0; r < d; ++r) {
      const double* row = P.data() + r * kCifarPixels;
      double acc = 0.0;
      for (std::size_t j = 0; j < kCifarPixels; ++j) acc += row[j] * x[j];
      ds.features.at(i, r) = std::tanh(acc);
    }
  }
  return ds;
}

// Feature file: "NODF", u32 version = 1, u32 N, u32 d, u8 has_labels,
// N*d little-endian f32 row-major, then N label bytes if has_labels.
// Features are stored as f32 and widened on load.
inline constexpr std::uint32_t kFeatureFileVersion = 1;

inline std::vector<unsigned char> encode_feature_file(const Dataset& ds) {
  const std::size_t n = ds.size(), d = ds.dim();
  if (!ds.labels.empty() && ds.labels.size() != n) {
    throw ContractError("feature file: label count does not match feature rows");
  }
  std::vector<unsigned char> buf;
  buf.reserve(17 + n * d * 4 + n);
  binio::put_bytes(buf, "NODF");
  binio::put_u32(buf, kFeatureFileVersion);
  binio::put_u32(buf, static_cast<std::uint32_t>(n));
  binio::put_u32(buf, static_cast<std::uint32_t>(d));
  const bool has_labels = !ds.labels.empty();
  binio::put_u8(buf, has_labels ? 1 : 0);
  for (double v : ds.features.values()) binio::put_f32(buf, static_cast<float>(v));
  if (has_labels) buf.insert(buf.end(), ds.labels.begin(), ds.labels.end());
  return buf;
}

inline Dataset decode_feature_file(const std::vector<unsigned char>& buf) {
  binio::Reader r(buf);
  r.expect_magic("NODF");
  const std::uint32_t version = r.u32("version");
  if (version != kFeatureFileVersion) {
    throw FormatError("unsupported feature file version " + std::to_string(version), 4);
  }
  const std::size_t n = r.u32("N");
  const std::size_t d = r.u32("d");
  const std::uint8_t has_labels = r.u8("has_labels");
  if (has_labels > 1) throw FormatError("bad has_labels byte " + std::to_string(has_labels), 16);
  if (d == 0) throw FormatError("feature dimension d must be positive", 12);
  const std::size_t expected = n * d * 4 + (has_labels ? n : 0);
  if (r.remaining() != expected) {
    throw FormatError("feature file length: expected " + std::to_string(expected) +
                          " payload bytes after header, found " + std::to_string(r.remaining()),
                      r.offset());
  }
  Dataset ds{Tensor({n, d}), {}, kCifarClasses};
  for (double& v : ds.features.span()) {
    const float f = r.f32("features");
    if (!std::isfinite(f)) throw DataError("feature file contains a non-finite value");
    v = static_cast<double>(f);
  }
  if (has_labels) {
    ds.labels.resize(n);
    for (auto& l : ds.labels) {
      l = r.u8("labels");
      if (l >= kCifarClasses) throw DataError("feature file label out of range: " + std::to_string(l));
    }
  }
  return ds;
}

inline void save_feature_file(const Dataset& ds, const std::string& path) {
  binio::write_file(path, encode_feature_file(ds));
}

inline Dataset load_feature_file(const std::string& path) {
  return decode_feature_file(binio::read_file(path));
}

inline Dataset select_rows(const Dataset& ds, std::span<const std::size_t> idx) {
  const std::size_t d = ds.dim();
  Dataset out{Tensor({idx.size(), d}), {}, ds.class_count};
  if (!ds.labels.empty()) out.labels.resize(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto row = ds.features.row(idx[i]);
    std::copy(row.begin(), row.end(), out.features.span().begin() + static_cast<std::ptrdiff_t>(i * d));
    if (!ds.labels.empty()) out.labels[i] = ds.labels[idx[i]];
  }
  return out;
}

struct Split {
  Dataset train;
  Dataset val;
  std::vector<std::size_t> train_index;
  std::vector<std::size_t> val_index;
};

// Seeded permutation, then the first round(N * val_fraction) indices go to
// validation.
inline Split split_train_val(const Dataset& ds, double val_fraction, std::uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
    throw ContractError("split_train_val: val_fraction must lie in (0, 1)");
  }
  const std::size_t n = ds.size();
  const auto n_val = static_cast<std::size_t>(std::llround(static_cast<double>(n) * val_fraction));
  if (n < 2 || n_val == 0 || n_val >= n) {
    throw ContractError("split_train_val: degenerate split of " + std::to_string(n) +
                        " samples with val_fraction " + std::to_string(val_fraction));
  }
  Rng rng(seed);
  std::vector<std::size_t> perm = permutation(n, rng);
  Split s;
  s.val_index.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_val));
  s.train_index.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_val), perm.end());
  s.train = select_rows(ds, s.train_index);
  s.val = select_rows(ds, s.val_index);
  return s;
}

}  // namespace nodetl
