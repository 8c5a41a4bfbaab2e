#include <gtest/gtest.h>

#include <cmath>

#include "helpers.hpp"
#include "pcnprobe/audit/audit.hpp"

using namespace pcnprobe;
using namespace pcnprobe::testing;

namespace {

std::vector<DecompositionRecord> synthetic_records(std::size_t n, RngStream& rng) {
  std::vector<DecompositionRecord> out(n);
  for (auto& r : out) {
    r.structural_correct = rng.uniform() < 0.7;
    r.residual = rng.normal();
    r.logsoftmax_margin = rng.normal();
  }
  return out;
}

}  // namespace

TEST(Decompose, IdentityHoldsExactly) {
  RngStream rng(1);
  KwayResult<float> k;
  const std::size_t n = 64;
  k.energies.resize(n * kClasses);
  for (auto& e : k.energies) e = rng.uniform(0.5, 30.0);
  const auto logits = randn<float>(Shape{n, kClasses}, rng, 4.0);
  std::vector<int> labels(n);
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = static_cast<int>(rng.below(kClasses));
    idx[i] = i;
  }
  for (const auto& r : decompose_batch(k, logits, labels, idx)) {
    EXPECT_EQ(r.energy_margin - r.logsoftmax_margin - r.residual, 0.0);
    EXPECT_GE(r.energy_margin, 0.0);
    EXPECT_NE(r.first, r.second);
    EXPECT_EQ(r.structural_correct, r.first == labels[r.image_index]);
  }
}

TEST(Decompose, HandComputedRecord) {
  const std::vector<double> e{3.0, 1.0, 2.0};
  const std::vector<double> logits{0.0, 1.0, 2.0};
  const auto r = decompose<double>(5, e, logits, 1);
  const double lse = std::log(1.0 + std::exp(1.0) + std::exp(2.0));
  EXPECT_EQ(r.first, 1);
  EXPECT_EQ(r.second, 2);
  EXPECT_DOUBLE_EQ(r.energy_margin, 1.0);
  EXPECT_NEAR(r.logsoftmax_margin, (1.0 - lse) - (2.0 - lse), 1e-15);
  EXPECT_NEAR(r.residual, 2.0, 1e-15);
  EXPECT_TRUE(r.structural_correct);
  EXPECT_FALSE(r.softmax_correct);
  EXPECT_EQ(r.softmax_first, 2);
  EXPECT_EQ(r.softmax_second, 1);
  EXPECT_DOUBLE_EQ(r.energy_gap_softmax_ranked, -1.0);
}

TEST(Decompose, ZeroGenerativeChainGivesZeroMargin) {
  auto m = PcnModel<float>::initialised(2);
  for (auto& p : m.generative.parameters()) p.tensor->fill(0.0f);
  RngStream rng(3);
  const auto x = randn<float>(batched(3, image_shape()), rng);
  const auto ff = encoder_forward(m.encoder, x);
  const std::vector<std::size_t> idx{0, 1, 2};
  const std::vector<int> labels{0, 1, 2};
  SettleConfig cfg;
  cfg.steps = 3;
  const auto k = kway_settle_energies(m.generative, ff, cfg, RngStream(1), idx);
  for (const auto& r : decompose_batch(k, ff[3], labels, idx)) {
    EXPECT_EQ(r.energy_margin, 0.0);
    EXPECT_EQ(r.residual, -r.logsoftmax_margin);
  }
}

// g3 columns are 256 * fc2 rows with equal-norm rows and zero biases, and
// g1, g2 predict nothing k-dependent. At T = 0 the k-dependent part of E_k is
// then exactly -z4_k, so M = L and D = 0 up to roundoff.
TEST(Decompose, MirroredReadoutHasZeroResidual) {
  auto m = PcnModel<double>::initialised(4);
  RngStream rng(5);
  for (std::size_t k = 0; k < kClasses; ++k) {
    double norm = 0.0;
    for (std::size_t j = 0; j < 256; ++j) norm += std::pow(m.encoder.fc2_weight[k * 256 + j], 2);
    for (std::size_t j = 0; j < 256; ++j) m.encoder.fc2_weight[k * 256 + j] /= std::sqrt(norm) * 4.0;
  }
  m.encoder.fc2_bias.fill(0.0);
  m.generative.g3_bias.fill(0.0);
  for (std::size_t j = 0; j < 256; ++j)
    for (std::size_t k = 0; k < kClasses; ++k)
      m.generative.g3_weight[j * kClasses + k] = 256.0 * m.encoder.fc2_weight[k * 256 + j];

  const auto x = randn<double>(batched(6, image_shape()), rng);
  const auto ff = encoder_forward(m.encoder, x);
  std::vector<std::size_t> idx(6);
  std::vector<int> labels(6, 0);
  for (std::size_t i = 0; i < 6; ++i) idx[i] = i;
  SettleConfig cfg;
  cfg.steps = 0;
  const auto k = kway_settle_energies(m.generative, ff, cfg, RngStream(1), idx);
  for (const auto& r : decompose_batch(k, ff[3], labels, idx)) {
    EXPECT_LT(std::abs(r.residual), 1e-3);
    EXPECT_EQ(r.first, r.softmax_first);
    EXPECT_EQ(r.second, r.softmax_second);
  }
}

TEST(ResidualCorrelation, ConstantResidualIsUndefined) {
  RngStream rng(6);
  auto recs = synthetic_records(20, rng);
  for (auto& r : recs) r.residual = 0.25;
  const auto c = residual_correlation(recs);
  EXPECT_FALSE(c.residual.has_value());
  EXPECT_TRUE(c.logsoftmax.has_value());
}

TEST(ResidualCorrelation, PermutationNull) {
  RngStream rng(7);
  auto recs = synthetic_records(1000, rng);
  // Residuals are a random permutation of a fixed list, independent of correctness.
  std::vector<double> pool(recs.size());
  for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = static_cast<double>(i) / 100.0;
  const auto order = permutation(pool.size(), rng);
  for (std::size_t i = 0; i < recs.size(); ++i) recs[i].residual = pool[order[i]];
  EXPECT_LT(std::abs(*residual_correlation(recs).residual), 0.1);
}

TEST(ResidualCorrelation, PlantedSignal) {
  RngStream rng(8);
  auto recs = synthetic_records(500, rng);
  for (auto& r : recs) r.logsoftmax_margin = (r.structural_correct ? 1.0 : 0.0) + 0.05 * rng.normal();
  EXPECT_GT(*residual_correlation(recs).logsoftmax, 0.9);
}

TEST(Noop, ZeroStepsReportsNoMovement) {
  const auto m = PcnModel<float>::initialised(9);
  RngStream rng(10);
  const auto x = randn<float>(batched(2, image_shape()), rng);
  const std::vector<std::size_t> idx{0, 1};
  SettleConfig cfg;
  cfg.steps = 0;
  const auto r = noop_report(m, x, idx, cfg, RngStream(1));
  EXPECT_EQ(r.settles, 2 * kClasses);
  for (std::size_t l = 0; l < 3; ++l) {
    EXPECT_EQ(r.movement[l], 0.0);
    EXPECT_EQ(r.mse[l], 0.0);
  }
  EXPECT_EQ(r.relative_energy_decrease, 0.0);
  EXPECT_EQ(r.fraction_nonincreasing, 1.0);
}

TEST(Noop, SettledReportIsFiniteAndDecreasing) {
  const auto m = PcnModel<float>::initialised(11);
  RngStream rng(12);
  const auto x = randn<float>(batched(2, image_shape()), rng);
  const std::vector<std::size_t> idx{0, 1};
  const auto r = noop_report(m, x, idx, SettleConfig{}, RngStream(1));
  for (std::size_t l = 0; l < 3; ++l) {
    EXPECT_GT(r.movement[l], 0.0);
    EXPECT_TRUE(std::isfinite(r.gradient[l]));
    EXPECT_GE(r.mse[l], 0.0);
  }
  EXPECT_GT(r.relative_energy_decrease, 0.0);
  EXPECT_EQ(r.fraction_nonincreasing, 1.0);
  const auto [lo, hi] = NoopReport::range(r.movement);
  EXPECT_LE(lo, hi);
}

TEST(Noop, AggregatesTelemetryMeans) {
  SettleTelemetry a, b;
  a.mean_abs_movement = {1.0, 2.0, 3.0};
  b.mean_abs_movement = {3.0, 4.0, 5.0};
  a.energy_initial = 10.0;
  a.energy_final = 9.0;
  b.energy_initial = 10.0;
  b.energy_final = 10.5;
  const std::vector<SettleTelemetry> t{a, b};
  const auto r = noop_report(t);
  EXPECT_EQ(r.movement[0], 2.0);
  EXPECT_EQ(r.movement[2], 4.0);
  EXPECT_DOUBLE_EQ(r.relative_energy_decrease, 0.25 / 10.0);
  EXPECT_EQ(r.fraction_nonincreasing, 0.5);
}
