#pragma once

// Type-2 metrics. Undefined results (one outcome class missing, zero
// variance) come back as std::nullopt rather than a placeholder number.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "pcnprobe/probes/probes.hpp"

namespace pcnprobe {

/// Probability that a correct response carries a higher margin than an
/// incorrect one, ties credited 0.5 (Mann-Whitney U with average ranks).
/// Rank sums are kept doubled so everything stays integral until the final
/// division.
inline std::optional<double> auroc2(std::span<const double> margins, const std::vector<bool>& correct) {
  if (margins.size() != correct.size()) throw std::invalid_argument("auroc2: margins and flags differ in length");
  const std::size_t n = margins.size();
  const auto n_pos = static_cast<std::uint64_t>(std::count(correct.begin(), correct.end(), true));
  const std::uint64_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) return std::nullopt;
  for (const double m : margins)
    if (std::isnan(m)) throw std::invalid_argument("auroc2: NaN margin");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return margins[a] < margins[b]; });
  std::uint64_t twice_rank_sum = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && margins[order[j]] == margins[order[i]]) ++j;
    // positions i..j-1 hold ranks i+1..j; twice their average is i + 1 + j
    std::uint64_t pos_in_group = 0;
    for (std::size_t t = i; t < j; ++t) pos_in_group += correct[order[t]] ? 1 : 0;
    twice_rank_sum += pos_in_group * (i + 1 + j);
    i = j;
  }
  const std::uint64_t twice_u = twice_rank_sum - n_pos * (n_pos + 1);
  return static_cast<double>(twice_u) / static_cast<double>(2 * n_pos * n_neg);
}

inline std::optional<double> auroc2(std::span<const ProbeRecord> records) {
  std::vector<double> m;
  std::vector<bool> c;
  for (const auto& r : records) {
    m.push_back(r.margin);
    c.push_back(r.correct);
  }
  return auroc2(m, c);
}

inline double accuracy(std::span<const ProbeRecord> records) {
  if (records.empty()) throw std::invalid_argument("accuracy: no records");
  const auto hits = std::count_if(records.begin(), records.end(), [](const ProbeRecord& r) { return r.correct; });
  return static_cast<double>(hits) / static_cast<double>(records.size());
}

/// Sample Pearson correlation; nullopt when either side has zero variance.
inline std::optional<double> pearson(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw std::invalid_argument("pearson: inputs differ in length");
  if (xs.size() < 3) throw std::invalid_argument("pearson: need at least 3 points");
  const double n = static_cast<double>(xs.size());
  const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double dx = xs[i] - mx, dy = ys[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

struct MetricsReport {
  std::size_t n = 0;
  std::size_t n_correct = 0;
  std::size_t n_incorrect = 0;
  double accuracy = 0.0;
  std::optional<double> auroc2;
};

inline MetricsReport summarize_records(std::span<const ProbeRecord> records) {
  MetricsReport m;
  m.n = records.size();
  m.accuracy = accuracy(records);
  m.n_correct = static_cast<std::size_t>(
      std::count_if(records.begin(), records.end(), [](const ProbeRecord& r) { return r.correct; }));
  m.n_incorrect = m.n - m.n_correct;
  m.auroc2 = auroc2(records);
  return m;
}

}  // namespace pcnprobe
