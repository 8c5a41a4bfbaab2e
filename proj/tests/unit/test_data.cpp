#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <set>

#include "helpers.hpp"
#include "pcnprobe/data/data.hpp"

using namespace pcnprobe;
using namespace pcnprobe::testing;

namespace {

std::vector<CifarRecord> random_records(std::size_t n, std::uint64_t seed) {
  RngStream rng(seed);
  std::vector<CifarRecord> out(n);
  for (auto& r : out) {
    r.label = static_cast<std::uint8_t>(rng.below(10));
    for (auto& p : r.pixels) p = static_cast<std::uint8_t>(rng.below(256));
  }
  return out;
}

void write_bytes(const std::filesystem::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

// Reads only the label bytes with stdio, stepping a fixed record stride.
std::map<int, int> reference_label_histogram(const std::filesystem::path& file, std::size_t first) {
  std::map<int, int> hist;
  std::FILE* f = std::fopen(file.string().c_str(), "rb");
  for (std::size_t i = 0; i < first; ++i) {
    std::fseek(f, static_cast<long>(i * 3073), SEEK_SET);
    hist[std::fgetc(f)]++;
  }
  std::fclose(f);
  return hist;
}

double nearest_mean_accuracy(const Dataset& ds, const std::vector<std::vector<double>>& patterns) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto row = ds.images.row(i);
    std::size_t best = 0;
    double best_dot = -1e300;
    for (std::size_t k = 0; k < patterns.size(); ++k) {
      double dot = 0.0;
      for (std::size_t p = 0; p < row.size(); ++p) dot += row[p] * patterns[k][p];
      if (dot > best_dot) {
        best_dot = dot;
        best = k;
      }
    }
    hits += static_cast<int>(best) == ds.labels[i];
  }
  return static_cast<double>(hits) / static_cast<double>(ds.size());
}

}  // namespace

TEST(Cifar, TestBatchHasTenThousandRecordsAndRoundTrips) {
  const auto dir = scratch_dir("cifar_full") / "cifar-10-batches-bin";
  std::filesystem::create_directories(dir);
  const auto records = random_records(10000, 1);
  const auto bytes = serialize_cifar10(records);
  write_bytes(dir / "test_batch.bin", bytes);

  const auto root = dir.parent_path();
  ASSERT_TRUE(cifar10_available(root));
  const auto loaded = load_cifar10_records(root, Split::test);
  EXPECT_EQ(loaded.size(), 10000u);
  EXPECT_EQ(serialize_cifar10(loaded), bytes);

  const auto ds = load_cifar10(root, Split::test);
  EXPECT_EQ(ds.size(), 10000u);
  EXPECT_EQ(ds.provenance, Provenance::cifar10);
  std::map<int, int> hist;
  for (std::size_t i = 0; i < 1280; ++i) hist[ds.labels[i]]++;
  EXPECT_EQ(hist, reference_label_histogram(dir / "test_batch.bin", 1280));
}

TEST(Cifar, NormalisationAndPlaneOrder) {
  CifarRecord r;
  r.label = 3;
  r.pixels.fill(0);
  r.pixels[0] = 255;            // R plane, (0, 0)
  r.pixels[1024 + 33] = 128;    // G plane, (1, 1)
  r.pixels[2048 + 1023] = 255;  // B plane, (31, 31)
  const std::vector<CifarRecord> one{r};
  const auto ds = normalise_cifar10(one, Split::train);
  EXPECT_NEAR(ds.images[0], (1.0 - 0.4914) / 0.2470, 1e-6);
  EXPECT_NEAR(ds.images[1], (0.0 - 0.4914) / 0.2470, 1e-6);
  EXPECT_NEAR(ds.images[1024 + 33], (128.0 / 255.0 - 0.4822) / 0.2435, 1e-6);
  EXPECT_NEAR(ds.images[2048 + 1023], (1.0 - 0.4465) / 0.2616, 1e-6);
  EXPECT_EQ(ds.labels[0], 3);
  for (const float v : ds.images.values()) {
    EXPECT_GE(v, -3.0f);
    EXPECT_LE(v, 3.0f);
  }
}

TEST(Cifar, FormatErrors) {
  auto bytes = serialize_cifar10(random_records(3, 2));
  bytes.pop_back();
  try {
    parse_cifar10(bytes, "short.bin");
    FAIL() << "expected a DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("byte offset 6146"), std::string::npos) << e.what();
  }
  auto bad = serialize_cifar10(random_records(3, 3));
  bad[3073] = 10;
  try {
    parse_cifar10(bad, "label.bin");
    FAIL() << "expected a DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("offset 3073"), std::string::npos) << e.what();
  }
  EXPECT_FALSE(cifar10_available(scratch_dir("cifar_missing")));
  EXPECT_THROW(load_cifar10(scratch_dir("cifar_missing"), Split::test), DataError);
}

TEST(Cifar, TrainSplitConcatenatesBatchesInOrder) {
  const auto dir = scratch_dir("cifar_train");
  write_bytes(dir / "test_batch.bin", serialize_cifar10(random_records(2, 4)));
  std::vector<CifarRecord> all;
  for (int b = 1; b <= 5; ++b) {
    const auto part = random_records(3, 10 + b);
    write_bytes(dir / ("data_batch_" + std::to_string(b) + ".bin"), serialize_cifar10(part));
    all.insert(all.end(), part.begin(), part.end());
  }
  const auto loaded = load_cifar10_records(dir, Split::train);
  EXPECT_EQ(serialize_cifar10(loaded), serialize_cifar10(all));
}

TEST(Synthetic, DeterministicAndBalanced) {
  SynthConfig cfg;
  cfg.count = 50;
  const auto a = synth_dataset(cfg, Split::train), b = synth_dataset(cfg, Split::train);
  EXPECT_TRUE(a.images == b.images);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_FALSE(a.images == synth_dataset(cfg, Split::test).images);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a.labels[i], static_cast<int>(i % 10));
  for (const float v : a.images.values()) {
    EXPECT_GE(v, -3.0f);
    EXPECT_LE(v, 3.0f);
  }
  cfg.seed = 43;
  EXPECT_FALSE(a.images == synth_dataset(cfg, Split::train).images);
  cfg.classes = 11;
  EXPECT_THROW(synth_dataset(cfg, Split::train), std::invalid_argument);
}

TEST(Synthetic, PatternsAreOrthonormal) {
  SynthConfig cfg;
  const auto p = synth_patterns(cfg);
  for (std::size_t a = 0; a < p.size(); ++a)
    for (std::size_t b = 0; b < p.size(); ++b) {
      double dot = 0.0;
      for (std::size_t i = 0; i < kCifarPixels; ++i) dot += p[a][i] * p[b][i];
      EXPECT_NEAR(dot, a == b ? 1.0 : 0.0, 1e-12);
    }
}

TEST(Synthetic, NoiselessDataIsLinearlySeparable) {
  SynthConfig cfg;
  cfg.count = 100;
  cfg.noise = 0.0;
  EXPECT_EQ(nearest_mean_accuracy(synth_dataset(cfg, Split::test), synth_patterns(cfg)), 1.0);
}

TEST(Synthetic, BayesFormulaMatchesClosedFormAndMonteCarlo) {
  // Two classes: nearest mean errs when a N(0, 2) variable exceeds a.
  for (const double a : {0.5, 1.0, 2.69}) {
    const double closed = 0.5 * std::erfc(-a / 2.0);  // Phi(a / sqrt 2)
    EXPECT_NEAR(synth_bayes_accuracy(2, a), closed, 1e-9);
  }
  EXPECT_NEAR(synth_bayes_accuracy(10, 2.69), 0.85, 0.005);

  SynthConfig cfg;
  cfg.count = 4000;
  const double mc = nearest_mean_accuracy(synth_dataset(cfg, Split::test), synth_patterns(cfg));
  EXPECT_NEAR(mc, synth_bayes_accuracy(10, cfg.signal_ratio), 0.025);
}

TEST(Batching, PureFunctionOfSeedAndEpoch) {
  const auto a = epoch_batches(103, 10, 42, 3), b = epoch_batches(103, 10, 42, 3);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, epoch_batches(103, 10, 42, 4));
  EXPECT_NE(a, epoch_batches(103, 10, 43, 3));
  ASSERT_EQ(a.size(), 11u);
  EXPECT_EQ(a.back().size(), 3u);
  std::set<std::size_t> seen;
  for (const auto& batch : a) seen.insert(batch.begin(), batch.end());
  EXPECT_EQ(seen.size(), 103u);
  EXPECT_EQ(*seen.rbegin(), 102u);
  EXPECT_THROW(epoch_batches(10, 0, 1, 1), std::invalid_argument);
}

TEST(Batching, EvaluationIsSequential) {
  const auto b = sequential_batches(1280, 128);
  ASSERT_EQ(b.size(), 10u);
  for (std::size_t i = 0; i < 10; ++i) {
    ASSERT_EQ(b[i].size(), 128u);
    EXPECT_EQ(b[i].front(), i * 128);
    EXPECT_EQ(b[i].back(), i * 128 + 127);
  }
}

TEST(DatasetView, SelectAndHead) {
  SynthConfig cfg;
  cfg.count = 20;
  const auto ds = synth_dataset(cfg, Split::train);
  const std::vector<std::size_t> idx{5, 2};
  const auto s = ds.select(idx);
  EXPECT_EQ(s.labels, (std::vector<int>{5, 2}));
  EXPECT_TRUE(std::equal(s.images.row(0).begin(), s.images.row(0).end(), ds.images.row(5).begin()));
  EXPECT_EQ(ds.head(7).size(), 7u);
  EXPECT_THROW(ds.select(std::vector<std::size_t>{20}), std::out_of_range);
}
