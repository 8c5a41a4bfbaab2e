#pragma once

#include <array>
#include <optional>
#include <vector>

#include "pcnprobe/model/model.hpp"
#include "pcnprobe/numerics/ops.hpp"

namespace pcnprobe {

/// Latent hierarchy for a batch. Index 0..3 holds z1..z4.
template <typename T>
struct LatentState {
  std::array<BasicTensor<T>, kLatentLayers> z;
  std::array<bool, kLatentLayers> clamped{false, false, false, false};
  std::array<BasicTensor<T>, kLatentLayers> feedforward;  // z^ff, written once at construction
  std::array<BasicTensor<T>, kLatentLayers> momentum;

  LatentState() = default;

  /// Starts from the amortised forward pass with zeroed momentum buffers.
  explicit LatentState(std::array<BasicTensor<T>, kLatentLayers> ff) : z(ff), feedforward(std::move(ff)) {
    const std::size_t n = z[0].extent(0);
    for (std::size_t l = 0; l < kLatentLayers; ++l) {
      require_shape(z[l], batched(n, latent_shape(l)), "latent state");
      momentum[l] = BasicTensor<T>(z[l].shape());
    }
  }

  std::size_t batch() const { return z[0].extent(0); }

  void clamp(std::size_t layer, BasicTensor<T> value) {
    require_same_shape(value, z.at(layer), "clamp value");
    z[layer] = std::move(value);
    clamped[layer] = true;
  }
};

/// Per-image energy terms. layer_terms[l] = 0.5 * mean((z_{l+1} - g_{l+1}(z_{l+2}))^2).
struct EnergyBreakdown {
  std::array<double, 3> layer_terms{};
  double ce_term = 0.0;
  double total = 0.0;
};

template <typename T>
struct Predictions {
  std::array<BasicTensor<T>, 3> pred;   // prediction of z1, z2, z3
  std::array<BasicTensor<T>, 3> error;  // z_l - pred_l
};

template <typename T>
Predictions<T> predict_chain(const GenerativeChain<T>& gen, const std::array<BasicTensor<T>, kLatentLayers>& z) {
  Predictions<T> p;
  for (int level = 1; level <= 3; ++level) {
    const auto l = static_cast<std::size_t>(level - 1);
    p.pred[l] = generative_predict(gen, level, z[l + 1]);
    p.error[l] = subtract(z[l], p.pred[l]);
  }
  return p;
}

/// Energy of each image in the batch. `target` is an optional batch of one-hot
/// (or probability) rows; without it the CE term is zero.
template <typename T>
std::vector<EnergyBreakdown> energy_from_errors(const Predictions<T>& p, const BasicTensor<T>& top,
                                                const std::type_identity_t<BasicTensor<T>>* target) {
  const std::size_t n = top.extent(0);
  std::vector<EnergyBreakdown> out(n);
  for (std::size_t l = 0; l < 3; ++l) {
    const auto ms = row_mean_of_squares(p.error[l]);
    for (std::size_t i = 0; i < n; ++i) out[i].layer_terms[l] = 0.5 * ms[i];
  }
  std::vector<T> ce;
  if (target) ce = cross_entropy(top, *target);
  for (std::size_t i = 0; i < n; ++i) {
    auto& e = out[i];
    e.ce_term = target ? static_cast<double>(ce[i]) : 0.0;
    e.total = e.layer_terms[0] + e.layer_terms[1] + e.layer_terms[2] + e.ce_term;
  }
  return out;
}

template <typename T>
std::vector<EnergyBreakdown> energy(const GenerativeChain<T>& gen, const LatentState<T>& state,
                                    const BasicTensor<T>* target) {
  if (target && state.clamped[3] && !(*target == state.z[3])) {
    throw std::invalid_argument("energy: target differs from the clamped output latent");
  }
  return energy_from_errors(predict_chain(gen, state.z), state.z[3], target);
}

template <typename T>
std::vector<EnergyBreakdown> energy(const PcnModel<T>& model, const LatentState<T>& state,
                                    const BasicTensor<T>* target) {
  return energy(model.generative, state, target);
}

}  // namespace pcnprobe
