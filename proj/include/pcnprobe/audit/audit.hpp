#pragma once

// Margin-level audit of the energy probe. For energy-ranked hypotheses a
// (lowest energy) and b (runner-up):
//   M = E_b - E_a,  L = log p_a - log p_b  (feedforward log-softmax),  D = M - L.
// M = L + D is an identity; the question is how D behaves.

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "pcnprobe/metrics/metrics.hpp"
#include "pcnprobe/probes/probes.hpp"

namespace pcnprobe {

struct DecompositionRecord {
  std::size_t image_index = 0;
  int first = 0;   // a
  int second = 0;  // b
  double energy_margin = 0.0;      // M
  double logsoftmax_margin = 0.0;  // L
  double residual = 0.0;           // D
  bool structural_correct = false;
  bool softmax_correct = false;
  // Same quantities with a, b ranked by softmax instead (verbose output).
  int softmax_first = 0;
  int softmax_second = 0;
  double energy_gap_softmax_ranked = 0.0;
  double logsoftmax_margin_softmax_ranked = 0.0;
};

namespace detail {

/// Best and runner-up indices; lowest index wins ties.
inline std::array<std::size_t, 2> top_two(std::span<const double> s, bool smallest) {
  const std::size_t a = extremal_index(s, smallest);
  std::size_t b = a == 0 ? 1 : 0;
  for (std::size_t k = b + 1; k < s.size(); ++k) {
    if (k == a) continue;
    if (smallest ? s[k] < s[b] : s[k] > s[b]) b = k;
  }
  return {a, b};
}

template <typename T>
std::vector<double> log_softmax_row(std::span<const T> logits) {
  double mx = static_cast<double>(logits[0]);
  for (const T v : logits) mx = std::max(mx, static_cast<double>(v));
  double sum = 0.0;
  for (const T v : logits) sum += std::exp(static_cast<double>(v) - mx);
  const double lse = mx + std::log(sum);
  std::vector<double> out(logits.size());
  for (std::size_t k = 0; k < logits.size(); ++k) out[k] = static_cast<double>(logits[k]) - lse;
  return out;
}

}  // namespace detail

template <typename T>
DecompositionRecord decompose(std::size_t image_index, std::span<const double> energies, std::span<const T> logits,
                              int label) {
  if (energies.size() != logits.size() || energies.size() < 2) {
    throw std::invalid_argument("decompose: need matching energies and logits for at least two classes");
  }
  const auto logp = detail::log_softmax_row(logits);
  const auto [a, b] = detail::top_two(energies, true);
  const auto [sa, sb] = detail::top_two(logp, false);
  DecompositionRecord r;
  r.image_index = image_index;
  r.first = static_cast<int>(a);
  r.second = static_cast<int>(b);
  r.energy_margin = energies[b] - energies[a];
  r.logsoftmax_margin = logp[a] - logp[b];
  r.residual = r.energy_margin - r.logsoftmax_margin;
  r.structural_correct = r.first == label;
  r.softmax_correct = static_cast<int>(sa) == label;
  r.softmax_first = static_cast<int>(sa);
  r.softmax_second = static_cast<int>(sb);
  r.energy_gap_softmax_ranked = energies[sb] - energies[sa];
  r.logsoftmax_margin_softmax_ranked = logp[sa] - logp[sb];
  return r;
}

template <typename T>
std::vector<DecompositionRecord> decompose_batch(const KwayResult<T>& kway, const BasicTensor<T>& logits,
                                                 std::span<const int> labels,
                                                 std::span<const std::size_t> image_indices) {
  const std::size_t n = labels.size();
  if (kway.energies.size() != n * kway.classes || logits.extent(0) != n || image_indices.size() != n ||
      logits.row_size() != kway.classes) {
    throw ShapeError("decompose_batch: energies, logits, labels and indices disagree");
  }
  std::vector<DecompositionRecord> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = logits.row(i);
    out.push_back(decompose(image_indices[i], std::span<const double>(kway.energies.data() + i * kway.classes, kway.classes),
                            std::span<const T>(row.data(), row.size()), labels[i]));
  }
  return out;
}

struct ResidualCorrelation {
  std::optional<double> residual;    // corr(D, structural correctness)
  std::optional<double> logsoftmax;  // corr(L, structural correctness)
};

inline ResidualCorrelation residual_correlation(std::span<const DecompositionRecord> records) {
  std::vector<double> d, l, c;
  for (const auto& r : records) {
    d.push_back(r.residual);
    l.push_back(r.logsoftmax_margin);
    c.push_back(r.structural_correct ? 1.0 : 0.0);
  }
  return {pearson(d, c), pearson(l, c)};
}

/// Energy margins as structural probe records, for cross-checking metrics.
inline std::vector<ProbeRecord> as_probe_records(std::span<const DecompositionRecord> records) {
  std::vector<ProbeRecord> out;
  for (const auto& r : records) {
    ProbeRecord p;
    p.image_index = r.image_index;
    p.predicted = r.first;
    p.margin = r.energy_margin;
    p.correct = r.structural_correct;
    out.push_back(std::move(p));
  }
  return out;
}

// ---------------------------------------------------------------------------
// No-op diagnostic: how far settling moves the latents from the feedforward
// initialisation.

struct NoopReport {
  std::size_t settles = 0;
  std::array<double, 3> movement{};  // mean over settles of mean |z_T - z^ff|, per layer
  std::array<double, 3> gradient{};  // mean latent-gradient magnitude, per layer
  std::array<double, 3> mse{};       // mean settled-vs-ff MSE, per layer
  double energy_initial = 0.0;       // mean over settles
  double energy_final = 0.0;
  double relative_energy_decrease = 0.0;  // (initial - final) / initial
  double fraction_nonincreasing = 0.0;    // settles whose final energy <= initial

  static std::pair<double, double> range(const std::array<double, 3>& v) {
    return {std::min({v[0], v[1], v[2]}), std::max({v[0], v[1], v[2]})};
  }
};

inline NoopReport noop_report(std::span<const SettleTelemetry> telemetry) {
  NoopReport r;
  r.settles = telemetry.size();
  if (telemetry.empty()) return r;
  std::size_t nonincreasing = 0;
  for (const auto& t : telemetry) {
    for (std::size_t l = 0; l < 3; ++l) {
      r.movement[l] += t.mean_abs_movement[l];
      r.gradient[l] += t.mean_abs_gradient[l];
      r.mse[l] += t.mse_to_feedforward[l];
    }
    r.energy_initial += t.energy_initial;
    r.energy_final += t.energy_final;
    nonincreasing += t.energy_final <= t.energy_initial;
  }
  const double n = static_cast<double>(telemetry.size());
  for (std::size_t l = 0; l < 3; ++l) {
    r.movement[l] /= n;
    r.gradient[l] /= n;
    r.mse[l] /= n;
  }
  r.energy_initial /= n;
  r.energy_final /= n;
  r.relative_energy_decrease =
      r.energy_initial != 0.0 ? (r.energy_initial - r.energy_final) / r.energy_initial : 0.0;
  r.fraction_nonincreasing = static_cast<double>(nonincreasing) / n;
  return r;
}

/// Telemetry over every clamped-hypothesis settle of the K-way probe.
template <typename T>
NoopReport noop_report(const PcnModel<T>& model, const BasicTensor<T>& x, std::span<const std::size_t> image_indices,
                       SettleConfig cfg, const RngStream& noise_root) {
  cfg.telemetry = true;
  const auto kway = kway_settle_energies(model.generative, encoder_forward(model.encoder, x), cfg, noise_root,
                                         image_indices);
  return noop_report(kway.telemetry);
}

}  // namespace pcnprobe
