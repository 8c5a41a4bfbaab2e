#pragma once

// Datasets: CIFAR-10 binary batches and a synthetic class-conditional
// Gaussian generator, plus reproducible batch ordering.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "pcnprobe/numerics/rng.hpp"
#include "pcnprobe/numerics/tensor.hpp"

namespace pcnprobe {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Split { train, test };
enum class Provenance { cifar10, synthetic };

inline const char* to_string(Split s) { return s == Split::train ? "train" : "test"; }
inline const char* to_string(Provenance p) { return p == Provenance::cifar10 ? "cifar10" : "synthetic"; }

struct Dataset {
  Tensor images;  // (N, 3, 32, 32), normalised
  std::vector<int> labels;
  Split split = Split::train;
  Provenance provenance = Provenance::synthetic;
  std::size_t classes = 10;

  std::size_t size() const { return labels.size(); }

  /// Rows in the given order.
  Dataset select(std::span<const std::size_t> indices) const {
    Dataset out{Tensor(Shape{indices.size(), 3, 32, 32}), {}, split, provenance, classes};
    const std::size_t row = images.row_size();
    out.labels.reserve(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
      const std::size_t src = indices[i];
      if (src >= size()) throw std::out_of_range("dataset index " + std::to_string(src) + " out of range");
      std::copy(images.data() + src * row, images.data() + (src + 1) * row, out.images.data() + i * row);
      out.labels.push_back(labels[src]);
    }
    return out;
  }

  /// The first n records in stored order.
  Dataset head(std::size_t n) const {
    if (n > size()) {
      throw DataError("requested the first " + std::to_string(n) + " records of a dataset with " +
                      std::to_string(size()));
    }
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    return select(idx);
  }
};

// ---------------------------------------------------------------------------
// CIFAR-10 binary format: 3073-byte records, one label byte then the R, G
// and B planes, each 32x32 row-major.

inline constexpr std::size_t kCifarPixels = 3 * 32 * 32;
inline constexpr std::size_t kCifarRecord = 1 + kCifarPixels;
inline constexpr std::array<double, 3> kCifarMean{0.4914, 0.4822, 0.4465};
inline constexpr std::array<double, 3> kCifarStd{0.2470, 0.2435, 0.2616};

struct CifarRecord {
  std::uint8_t label = 0;
  std::array<std::uint8_t, kCifarPixels> pixels{};
};

inline std::vector<CifarRecord> parse_cifar10(std::span<const std::uint8_t> bytes, const std::string& source) {
  if (bytes.size() % kCifarRecord != 0) {
    const std::size_t tail = bytes.size() - bytes.size() % kCifarRecord;
    throw DataError(source + ": size " + std::to_string(bytes.size()) + " is not a multiple of " +
                    std::to_string(kCifarRecord) + "; trailing partial record at byte offset " +
                    std::to_string(tail));
  }
  std::vector<CifarRecord> out(bytes.size() / kCifarRecord);
  for (std::size_t r = 0; r < out.size(); ++r) {
    const std::size_t off = r * kCifarRecord;
    if (bytes[off] > 9) {
      throw DataError(source + ": label " + std::to_string(bytes[off]) + " out of range at byte offset " +
                      std::to_string(off));
    }
    out[r].label = bytes[off];
    std::copy(bytes.begin() + static_cast<std::ptrdiff_t>(off + 1),
              bytes.begin() + static_cast<std::ptrdiff_t>(off + kCifarRecord), out[r].pixels.begin());
  }
  return out;
}

inline std::vector<std::uint8_t> serialize_cifar10(std::span<const CifarRecord> records) {
  std::vector<std::uint8_t> out;
  out.reserve(records.size() * kCifarRecord);
  for (const auto& r : records) {
    out.push_back(r.label);
    out.insert(out.end(), r.pixels.begin(), r.pixels.end());
  }
  return out;
}

inline Dataset normalise_cifar10(std::span<const CifarRecord> records, Split split) {
  Dataset ds{Tensor(Shape{records.size(), 3, 32, 32}), {}, split, Provenance::cifar10, 10};
  ds.labels.reserve(records.size());
  for (std::size_t r = 0; r < records.size(); ++r) {
    float* dst = ds.images.data() + r * kCifarPixels;
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < 1024; ++p) {
        const double v = records[r].pixels[c * 1024 + p] / 255.0;
        dst[c * 1024 + p] = static_cast<float>((v - kCifarMean[c]) / kCifarStd[c]);
      }
    ds.labels.push_back(records[r].label);
  }
  return ds;
}

inline std::vector<std::string> cifar10_files(Split split) {
  if (split == Split::test) return {"test_batch.bin"};
  return {"data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"};
}

/// Accepts either the directory holding the .bin files or its parent
/// (the stock archive unpacks into cifar-10-batches-bin/).
inline std::filesystem::path resolve_cifar10_dir(const std::filesystem::path& root) {
  for (const auto& dir : {root, root / "cifar-10-batches-bin"}) {
    if (std::filesystem::exists(dir / "test_batch.bin")) return dir;
  }
  return {};
}

inline bool cifar10_available(const std::filesystem::path& root) { return !resolve_cifar10_dir(root).empty(); }

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::vector<CifarRecord> load_cifar10_records(const std::filesystem::path& root, Split split) {
  const auto dir = resolve_cifar10_dir(root);
  if (dir.empty()) throw DataError("no CIFAR-10 binary batches under " + root.string());
  std::vector<CifarRecord> all;
  for (const auto& name : cifar10_files(split)) {
    const auto bytes = read_file_bytes(dir / name);
    auto part = parse_cifar10(bytes, (dir / name).string());
    all.insert(all.end(), part.begin(), part.end());
  }
  return all;
}

inline Dataset load_cifar10(const std::filesystem::path& root, Split split) {
  return normalise_cifar10(load_cifar10_records(root, split), split);
}

// ---------------------------------------------------------------------------
// Synthetic data. Class k has mean a * u_k where the u_k are orthonormal,
// piecewise constant over 8x8 pixel blocks; noise is isotropic with std
// `noise`. Nearest-mean is Bayes optimal, with accuracy
//   integral phi(z) Phi(z + a / noise)^(K - 1) dz.

struct SynthConfig {
  std::size_t classes = 10;
  std::size_t count = 1000;
  std::uint64_t seed = 42;
  double noise = 1.0;
  double signal_ratio = 2.69;  // a / noise; Bayes accuracy 0.850 at K = 10
  std::size_t block = 8;       // side of the constant blocks in the class patterns
};

/// Bayes accuracy of the generator by Simpson's rule on [-12, 12].
inline double synth_bayes_accuracy(std::size_t classes, double signal_ratio) {
  const int steps = 4000;
  const double lo = -12.0, hi = 12.0, h = (hi - lo) / steps;
  auto f = [&](double z) {
    const double phi = std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
    const double cdf = 0.5 * std::erfc(-(z + signal_ratio) / std::numbers::sqrt2);
    return phi * std::pow(cdf, static_cast<double>(classes - 1));
  };
  double acc = f(lo) + f(hi);
  for (int i = 1; i < steps; ++i) acc += f(lo + i * h) * (i % 2 ? 4.0 : 2.0);
  return acc * h / 3.0;
}

/// Unit-norm class patterns, (classes, 3 * 32 * 32). Depends on the seed only,
/// so train and test splits share them.
inline std::vector<std::vector<double>> synth_patterns(const SynthConfig& cfg) {
  if (cfg.block == 0 || 32 % cfg.block != 0) throw std::invalid_argument("synthetic block must divide 32");
  const std::size_t side = 32 / cfg.block, dims = 3 * side * side;
  if (cfg.classes > dims) throw std::invalid_argument("more classes than pattern dimensions");
  RngStream rng = RngStream(cfg.seed).derive(0x5A77E);
  std::vector<std::vector<double>> basis(cfg.classes, std::vector<double>(dims));
  for (auto& b : basis) {
    for (auto& v : b) v = rng.normal();
  }
  // Gram-Schmidt, twice for numerical orthogonality.
  for (std::size_t k = 0; k < cfg.classes; ++k) {
    for (int pass = 0; pass < 2; ++pass)
      for (std::size_t j = 0; j < k; ++j) {
        double dot = 0.0;
        for (std::size_t d = 0; d < dims; ++d) dot += basis[k][d] * basis[j][d];
        for (std::size_t d = 0; d < dims; ++d) basis[k][d] -= dot * basis[j][d];
      }
    double norm = 0.0;
    for (const double v : basis[k]) norm += v * v;
    norm = std::sqrt(norm);
    for (auto& v : basis[k]) v /= norm;
  }
  const double spread = 1.0 / static_cast<double>(cfg.block);  // keeps unit norm over block^2 pixels
  std::vector<std::vector<double>> out(cfg.classes, std::vector<double>(kCifarPixels));
  for (std::size_t k = 0; k < cfg.classes; ++k)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < 32; ++y)
        for (std::size_t x = 0; x < 32; ++x) {
          const std::size_t cell = (c * side + y / cfg.block) * side + x / cfg.block;
          out[k][(c * 32 + y) * 32 + x] = basis[k][cell] * spread;
        }
  return out;
}

/// Balanced labels (i mod K), pixels clamped to [-3, 3]. Deterministic in
/// (seed, split).
inline Dataset synth_dataset(const SynthConfig& cfg, Split split) {
  if (cfg.classes < 2 || cfg.classes > 10) throw std::invalid_argument("synthetic classes must be in [2, 10]");
  if (cfg.noise < 0) throw std::invalid_argument("synthetic noise must be non-negative");
  const auto patterns = synth_patterns(cfg);
  const double amplitude = cfg.signal_ratio * (cfg.noise > 0 ? cfg.noise : 1.0);
  const RngStream root = RngStream(cfg.seed).derive(split == Split::train ? 0x7EA1 : 0x7E57);
  Dataset ds{Tensor(Shape{cfg.count, 3, 32, 32}), {}, split, Provenance::synthetic, cfg.classes};
  ds.labels.resize(cfg.count);
  for (std::size_t i = 0; i < cfg.count; ++i) {
    const std::size_t k = i % cfg.classes;
    ds.labels[i] = static_cast<int>(k);
    RngStream rng = root.derive(i);
    float* dst = ds.images.data() + i * kCifarPixels;
    for (std::size_t p = 0; p < kCifarPixels; ++p) {
      const double v = amplitude * patterns[k][p] + cfg.noise * rng.normal();
      dst[p] = static_cast<float>(std::clamp(v, -3.0, 3.0));
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Batching

/// Shuffled minibatches for one epoch; a pure function of (seed, epoch). The
/// last batch may be short.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                           std::uint64_t epoch) {
  if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
  RngStream rng = RngStream(seed).derive(0xBA7C4, epoch);
  const auto order = permutation(n, rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch_size) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch_size)));
  }
  return out;
}

/// Consecutive batches in stored order (evaluation).
inline std::vector<std::vector<std::size_t>> sequential_batches(std::size_t n, std::size_t batch_size) {
  if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch_size) {
    auto& b = out.emplace_back();
    for (std::size_t j = i; j < std::min(n, i + batch_size); ++j) b.push_back(j);
  }
  return out;
}

}  // namespace pcnprobe
