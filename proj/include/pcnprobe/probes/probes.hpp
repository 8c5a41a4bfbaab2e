#pragma once

// Confidence probes. Both emit one ProbeRecord per image; ties resolve to the
// lowest class index.

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "pcnprobe/engine/settle.hpp"

namespace pcnprobe {

enum class ProbeKind { structural, softmax };

inline const char* to_string(ProbeKind k) { return k == ProbeKind::structural ? "structural" : "softmax"; }

struct ProbeRecord {
  std::size_t image_index = 0;
  ProbeKind probe = ProbeKind::structural;
  int predicted = 0;
  double margin = 0.0;
  bool correct = false;
  std::vector<double> scores;  // settled energies or softmax probabilities
};

namespace detail {

/// Index of the extremal score, first occurrence wins.
inline std::size_t extremal_index(std::span<const double> s, bool smallest) {
  if (s.empty()) throw std::invalid_argument("probe: no class scores");
  std::size_t best = 0;
  for (std::size_t k = 1; k < s.size(); ++k)
    if (smallest ? s[k] < s[best] : s[k] > s[best]) best = k;
  return best;
}

/// Second-ranked score: the extremum over all classes except `best`.
inline double runner_up(std::span<const double> s, std::size_t best, bool smallest) {
  if (s.size() < 2) throw std::invalid_argument("probe: need at least two classes");
  const std::size_t first = best == 0 ? 1 : 0;
  double v = s[first];
  for (std::size_t k = first + 1; k < s.size(); ++k)
    if (k != best) v = smallest ? std::min(v, s[k]) : std::max(v, s[k]);
  return v;
}

}  // namespace detail

/// argmin E_k, margin E_(2) - E_(1).
inline ProbeRecord structural_record(std::size_t image_index, std::span<const double> energies, int label) {
  const std::size_t best = detail::extremal_index(energies, true);
  ProbeRecord r;
  r.image_index = image_index;
  r.probe = ProbeKind::structural;
  r.predicted = static_cast<int>(best);
  r.margin = detail::runner_up(energies, best, true) - energies[best];
  r.correct = r.predicted == label;
  r.scores.assign(energies.begin(), energies.end());
  return r;
}

/// Softmax in double with max subtraction.
template <typename T>
std::vector<double> softmax_probabilities(std::span<const T> logits) {
  if (logits.empty()) throw std::invalid_argument("softmax probe: empty logits");
  const double mx = static_cast<double>(*std::max_element(logits.begin(), logits.end()));
  std::vector<double> p(logits.size());
  double sum = 0.0;
  for (std::size_t k = 0; k < logits.size(); ++k) sum += p[k] = std::exp(static_cast<double>(logits[k]) - mx);
  for (auto& v : p) v /= sum;
  return p;
}

/// argmax p_k, margin p_(1) - p_(2).
template <typename T>
ProbeRecord softmax_record(std::size_t image_index, std::span<const T> logits, int label) {
  ProbeRecord r;
  r.image_index = image_index;
  r.probe = ProbeKind::softmax;
  r.scores = softmax_probabilities(logits);
  const std::size_t best = detail::extremal_index(r.scores, false);
  r.predicted = static_cast<int>(best);
  r.margin = r.scores[best] - detail::runner_up(r.scores, best, false);
  r.correct = r.predicted == label;
  return r;
}

template <typename T>
std::vector<ProbeRecord> softmax_probe(const BasicTensor<T>& logits, std::span<const int> labels,
                                       std::span<const std::size_t> image_indices) {
  if (logits.extent(0) != labels.size() || labels.size() != image_indices.size()) {
    throw ShapeError("softmax probe: logits, labels and indices disagree in length");
  }
  std::vector<ProbeRecord> out;
  out.reserve(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto row = logits.row(i);
    out.push_back(softmax_record(image_indices[i], std::span<const T>(row.data(), row.size()), labels[i]));
  }
  return out;
}

template <typename T>
std::vector<ProbeRecord> structural_probe(const KwayResult<T>& kway, std::span<const int> labels,
                                          std::span<const std::size_t> image_indices) {
  if (kway.energies.size() != labels.size() * kway.classes || labels.size() != image_indices.size()) {
    throw ShapeError("structural probe: energies, labels and indices disagree in length");
  }
  std::vector<ProbeRecord> out;
  out.reserve(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const std::span<const double> e(kway.energies.data() + i * kway.classes, kway.classes);
    out.push_back(structural_record(image_indices[i], e, labels[i]));
  }
  return out;
}

/// Runs the K-way settle from the eval-mode forward pass of `x`.
template <typename T>
std::vector<ProbeRecord> structural_probe(const PcnModel<T>& model, const BasicTensor<T>& x,
                                          std::span<const int> labels, std::span<const std::size_t> image_indices,
                                          const SettleConfig& cfg, const RngStream& noise_root) {
  const auto ff = encoder_forward(model.encoder, x);
  return structural_probe(kway_settle_energies(model.generative, ff, cfg, noise_root, image_indices), labels,
                          image_indices);
}

}  // namespace pcnprobe
