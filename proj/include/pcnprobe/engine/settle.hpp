#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pcnprobe/engine/energy.hpp"
#include "pcnprobe/numerics/rng.hpp"

namespace pcnprobe {

struct SettleConfig {
  int steps = 13;                // T
  double learning_rate = 5e-2;   // latent step size
  double momentum = 0.5;
  double sigma = 0.0;            // Langevin noise std, added after each gradient step
  bool telemetry = false;
  int keep_last = 0;             // number of trailing states to return (MCPC samples)
};

/// Per-image diagnostics of one settle run, for layers z1..z3.
struct SettleTelemetry {
  std::array<double, 3> mean_abs_movement{};  // mean |z_T - z^ff|
  std::array<double, 3> mean_abs_gradient{};  // mean over steps of mean |dE/dz|
  std::array<double, 3> mse_to_feedforward{};
  double energy_initial = 0.0;
  double energy_final = 0.0;
};

template <typename T>
struct SettleResult {
  LatentState<T> state;
  std::vector<EnergyBreakdown> initial_energy;
  std::vector<EnergyBreakdown> final_energy;
  std::vector<SettleTelemetry> telemetry;                       // empty unless requested
  std::vector<std::array<BasicTensor<T>, kLatentLayers>> samples;  // last keep_last states, oldest first
};

namespace detail {

// Per-image scaled errors e_l / n_l: the gradient of 0.5 * mean(e_l^2).
template <typename T>
std::array<BasicTensor<T>, 3> scaled_errors(const Predictions<T>& p) {
  std::array<BasicTensor<T>, 3> s;
  for (std::size_t l = 0; l < 3; ++l) {
    s[l] = p.error[l];
    scale(s[l], static_cast<T>(1.0 / static_cast<double>(p.error[l].row_size())));
  }
  return s;
}

}  // namespace detail

/// Gradient of the per-image energy with respect to each unclamped latent.
/// Clamped layers get an empty tensor.
template <typename T>
std::array<BasicTensor<T>, kLatentLayers> latent_gradients(const GenerativeChain<T>& gen, const LatentState<T>& s,
                                                           const Predictions<T>& p, const BasicTensor<T>* target) {
  const auto se = detail::scaled_errors(p);
  std::array<BasicTensor<T>, kLatentLayers> g;
  const GradRequest input_only{.input = true, .params = false};
  for (std::size_t l = 0; l < kLatentLayers; ++l) {
    if (s.clamped[l]) continue;
    if (l < 3) {
      g[l] = se[l];
    } else {
      g[l] = BasicTensor<T>(s.z[l].shape());
      if (target) g[l] = cross_entropy_backward(s.z[3], *target, std::vector<T>(s.batch(), T{1}));
    }
    if (l >= 1) {
      // z_l also feeds the prediction of the layer below.
      auto back = generative_backward(gen, static_cast<int>(l), s.z[l], se[l - 1], input_only);
      axpy(T{-1}, back.upper, g[l]);
    }
  }
  return g;
}

/// Runs T steps of momentum SGD on the unclamped latents, optionally adding
/// sigma * N(0, I) after each step. `noise` supplies one stream per image and
/// is only consulted when sigma > 0.
template <typename T>
SettleResult<T> settle(const GenerativeChain<T>& gen, LatentState<std::type_identity_t<T>> state,
                       const SettleConfig& cfg, const std::type_identity_t<BasicTensor<T>>* target,
                       std::span<RngStream> noise = {}) {
  if (cfg.steps < 0) throw std::invalid_argument("settle: negative step count");
  if (cfg.sigma < 0) throw std::invalid_argument("settle: negative noise level");
  const std::size_t n = state.batch();
  if (cfg.sigma > 0 && noise.size() != n) throw std::invalid_argument("settle: need one noise stream per image");
  for (auto& m : state.momentum) m.fill(T{0});

  SettleResult<T> r;
  const int first_kept = std::max(0, cfg.steps - cfg.keep_last + 1);
  auto keep = [&](int t) {
    if (cfg.keep_last > 0 && t >= first_kept) r.samples.push_back(state.z);
  };
  auto check_finite = [&](const std::vector<EnergyBreakdown>& e, int step) {
    for (std::size_t i = 0; i < e.size(); ++i) {
      if (!std::isfinite(e[i].total)) {
        throw NonFiniteError("settle: non-finite energy at step " + std::to_string(step) + " for batch row " +
                             std::to_string(i));
      }
    }
  };

  std::vector<std::array<double, 3>> grad_sum;
  if (cfg.telemetry) grad_sum.assign(n, {0.0, 0.0, 0.0});

  Predictions<T> p = predict_chain(gen, state.z);
  r.initial_energy = energy_from_errors(p, state.z[3], target);
  check_finite(r.initial_energy, 0);
  keep(0);

  const T lr = static_cast<T>(cfg.learning_rate);
  const T mu = static_cast<T>(cfg.momentum);
  for (int t = 1; t <= cfg.steps; ++t) {
    const auto g = latent_gradients(gen, state, p, target);
    for (std::size_t l = 0; l < kLatentLayers; ++l) {
      if (state.clamped[l]) continue;
      auto& z = state.z[l];
      auto& b = state.momentum[l];
      for (std::size_t i = 0; i < z.size(); ++i) {
        b[i] = mu * b[i] + g[l][i];
        z[i] -= lr * b[i];
      }
      if (cfg.telemetry && l < 3) {
        const std::size_t rs = z.row_size();
        for (std::size_t i = 0; i < n; ++i) {
          double acc = 0.0;
          for (std::size_t j = 0; j < rs; ++j) acc += std::abs(static_cast<double>(g[l][i * rs + j]));
          grad_sum[i][l] += acc / static_cast<double>(rs);
        }
      }
    }
    if (cfg.sigma > 0) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t l = 0; l < kLatentLayers; ++l) {
          if (state.clamped[l]) continue;
          for (T& v : state.z[l].row(i)) v += static_cast<T>(cfg.sigma * noise[i].normal());
        }
      }
    }
    p = predict_chain(gen, state.z);
    if (t == cfg.steps) {
      r.final_energy = energy_from_errors(p, state.z[3], target);
      check_finite(r.final_energy, t);
    }
    keep(t);
  }
  if (cfg.steps == 0) r.final_energy = r.initial_energy;

  if (cfg.telemetry) {
    r.telemetry.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      auto& tel = r.telemetry[i];
      tel.energy_initial = r.initial_energy[i].total;
      tel.energy_final = r.final_energy[i].total;
      for (std::size_t l = 0; l < 3; ++l) {
        const auto now = state.z[l].row(i);
        const auto ff = state.feedforward[l].row(i);
        double abs_sum = 0.0, sq_sum = 0.0;
        for (std::size_t j = 0; j < now.size(); ++j) {
          const double d = static_cast<double>(now[j]) - ff[j];
          abs_sum += std::abs(d);
          sq_sum += d * d;
        }
        tel.mean_abs_movement[l] = abs_sum / static_cast<double>(now.size());
        tel.mse_to_feedforward[l] = sq_sum / static_cast<double>(now.size());
        tel.mean_abs_gradient[l] = cfg.steps > 0 ? grad_sum[i][l] / cfg.steps : 0.0;
      }
    }
  }
  r.state = std::move(state);
  return r;
}

template <typename T>
BasicTensor<T> one_hot_rows(std::size_t n, std::size_t k, std::size_t classes = kClasses) {
  BasicTensor<T> out(Shape{n, classes});
  for (std::size_t i = 0; i < n; ++i) out[i * classes + k] = T{1};
  return out;
}

/// Noise streams for one (batch, hypothesis) settle: image index and
/// hypothesis select an independent child of the run stream, so results do
/// not depend on how images are grouped into batches.
inline std::vector<RngStream> noise_streams(const RngStream& root, std::span<const std::size_t> image_indices,
                                            std::size_t hypothesis) {
  std::vector<RngStream> out;
  out.reserve(image_indices.size());
  for (const std::size_t idx : image_indices) out.push_back(root.derive(idx, hypothesis));
  return out;
}

/// Settled total energy of every image under each of K clamped one-hot
/// hypotheses. Each hypothesis starts from a fresh copy of the feedforward
/// latents with zeroed momentum. Row-major (N, K).
template <typename T>
struct KwayResult {
  std::vector<double> energies;  // n * classes
  std::size_t classes = kClasses;
  std::vector<SettleTelemetry> telemetry;  // n * classes when requested, image-major

  double at(std::size_t image, std::size_t k) const { return energies[image * classes + k]; }
};

template <typename T>
KwayResult<T> kway_settle_energies(const GenerativeChain<T>& gen,
                                   const std::array<BasicTensor<T>, kLatentLayers>& feedforward,
                                   const SettleConfig& cfg, const RngStream& noise_root,
                                   std::span<const std::size_t> image_indices, std::size_t classes = kClasses) {
  const std::size_t n = feedforward[0].extent(0);
  if (image_indices.size() != n) throw std::invalid_argument("kway_settle_energies: one index per image required");
  KwayResult<T> out;
  out.classes = classes;
  out.energies.resize(n * classes);
  if (cfg.telemetry) out.telemetry.resize(n * classes);
  for (std::size_t k = 0; k < classes; ++k) {
    LatentState<T> s(feedforward);
    const BasicTensor<T> hyp = one_hot_rows<T>(n, k);
    s.clamp(3, hyp);
    std::vector<RngStream> streams;
    if (cfg.sigma > 0) streams = noise_streams(noise_root, image_indices, k);
    auto r = settle(gen, std::move(s), cfg, &hyp, std::span<RngStream>(streams));
    for (std::size_t i = 0; i < n; ++i) {
      out.energies[i * classes + k] = r.final_energy[i].total;
      if (cfg.telemetry) out.telemetry[i * classes + k] = r.telemetry[i];
    }
  }
  return out;
}

}  // namespace pcnprobe
