#pragma once

// Weight learning: predictive-coding training (final-state and MCPC),
// backprop training of the encoder alone, and post-hoc decoder fitting.
//
// PC weight objective per batch, with settled latents z* held constant:
//   generative  mean_i sum_l 0.5 * mean((z*_l - g_l(z*_{l+1}))^2)
//   alignment   mean_i sum_{l<4} mean((z^ff_l - z*_l)^2)
//   readout     mean_i CE(z^ff_4, y)
// For MCPC the first two are averaged over the last M samples of the chain.

#include <array>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "pcnprobe/data/data.hpp"
#include "pcnprobe/engine/settle.hpp"
#include "pcnprobe/numerics/optim.hpp"

namespace pcnprobe {

enum class PcMode { final_state, mcpc };

struct PcTrainConfig {
  SettleConfig settle;  // sigma > 0 gives Langevin training
  PcMode mode = PcMode::final_state;
  int mcpc_samples = 10;  // M, used in mcpc mode
  double generative_weight = 1.0;
  double alignment_weight = 1.0;
  double readout_weight = 1.0;

  int samples() const { return mode == PcMode::mcpc ? mcpc_samples : 1; }
};

struct EpochStats {
  double readout_loss = 0.0;     // CE of the feedforward logits
  double generative_loss = 0.0;  // layer terms of the settled energy
  double alignment_loss = 0.0;
  double accuracy = 0.0;         // feedforward argmax on training batches
  std::size_t batches = 0;
  std::size_t samples = 0;
};

template <typename T>
struct BatchGradients {
  ParamGrads<T> encoder;     // Encoder::parameters() order, empty if untouched
  ParamGrads<T> generative;  // GenerativeChain::parameters() order, empty if untouched
  double readout_loss = 0.0;
  double generative_loss = 0.0;
  double alignment_loss = 0.0;
  std::size_t correct = 0;
};

namespace detail {

template <typename T>
std::size_t count_correct(const BasicTensor<T>& logits, std::span<const int> labels) {
  const std::size_t k = logits.row_size();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto row = logits.row(i);
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (row[j] > row[best]) best = j;
    correct += static_cast<int>(best) == labels[i];
  }
  return correct;
}

template <typename T>
void zero_like(ParamGrads<T>& grads, const std::vector<ConstNamedTensor<T>>& params) {
  grads.clear();
  for (const auto& p : params) grads.emplace_back(p.tensor->shape());
}

inline void check_loss(double v, const char* what, std::size_t batch) {
  if (!std::isfinite(v)) {
    throw NonFiniteError(std::string("training: non-finite ") + what + " at batch " + std::to_string(batch));
  }
}

}  // namespace detail

/// Gradients of the PC weight objective for a batch whose settled samples are
/// given; `trace` is the encoder's train-mode forward pass on the batch.
template <typename T>
BatchGradients<T> pc_weight_gradients(const PcnModel<T>& model, const EncoderTrace<T>& trace,
                                      std::span<const int> labels,
                                      std::span<const std::array<BasicTensor<T>, kLatentLayers>> samples,
                                      const PcTrainConfig& cfg) {
  if (samples.empty()) throw std::invalid_argument("pc_weight_gradients: no latent samples");
  const std::size_t n = trace.input.extent(0);
  const double inv_n = 1.0 / static_cast<double>(n);
  const double inv_m = 1.0 / static_cast<double>(samples.size());
  const BasicTensor<T> target = one_hot<T>(labels, trace.z[3].row_size());

  BatchGradients<T> out;
  detail::zero_like(out.generative, model.generative.parameters());
  std::array<BasicTensor<T>, kLatentLayers> dz;
  for (std::size_t l = 0; l < 3; ++l) dz[l] = BasicTensor<T>(trace.z[l].shape());

  for (const auto& z : samples) {
    const auto p = predict_chain(model.generative, z);
    for (int level = 1; level <= 3; ++level) {
      const auto l = static_cast<std::size_t>(level - 1);
      const double per = 1.0 / static_cast<double>(p.error[l].row_size());
      for (const double v : row_mean_of_squares(p.error[l])) out.generative_loss += 0.5 * v * inv_n * inv_m;
      BasicTensor<T> dpred = p.error[l];
      scale(dpred, static_cast<T>(-cfg.generative_weight * per * inv_n * inv_m));
      auto g = generative_backward(model.generative, level, z[l + 1], dpred, GradRequest{.input = false, .params = true});
      const std::size_t w = generative_weight_index(level);
      axpy(T{1}, g.weight, out.generative[w]);
      axpy(T{1}, g.bias, out.generative[w + 1]);
    }
    for (std::size_t l = 0; l < 3; ++l) {
      const BasicTensor<T> diff = subtract(trace.z[l], z[l]);
      const double per = 1.0 / static_cast<double>(diff.row_size());
      for (const double v : row_mean_of_squares(diff)) out.alignment_loss += v * inv_n * inv_m;
      axpy(static_cast<T>(2.0 * cfg.alignment_weight * per * inv_n * inv_m), diff, dz[l]);
    }
  }

  for (const T v : cross_entropy(trace.z[3], target)) out.readout_loss += static_cast<double>(v) * inv_n;
  dz[3] = cross_entropy_backward(trace.z[3], target, std::vector<T>(n, static_cast<T>(cfg.readout_weight * inv_n)));
  out.encoder = encoder_backward(model.encoder, trace, dz);
  out.correct = detail::count_correct(trace.z[3], labels);
  return out;
}

/// The scalar the gradients above differentiate; for finite-difference checks.
template <typename T>
double pc_weight_objective(const PcnModel<T>& model, const BasicTensor<T>& x, std::span<const int> labels,
                           std::span<const std::array<BasicTensor<T>, kLatentLayers>> samples,
                           const PcTrainConfig& cfg) {
  const std::size_t n = x.extent(0);
  const double inv_m = 1.0 / static_cast<double>(samples.size());
  const auto trace = encoder_forward_trace(model.encoder, x, Mode::train);
  double gen = 0.0, align = 0.0, readout = 0.0;
  for (const auto& z : samples) {
    for (const auto& e : energy_from_errors(predict_chain(model.generative, z), z[3], nullptr)) {
      gen += e.total * inv_m;
    }
    for (std::size_t l = 0; l < 3; ++l)
      for (const double v : row_mean_of_squares(subtract(trace.z[l], z[l]))) align += v * inv_m;
  }
  for (const T v : cross_entropy(trace.z[3], one_hot<T>(labels, trace.z[3].row_size()))) readout += v;
  return (cfg.generative_weight * gen + cfg.alignment_weight * align + cfg.readout_weight * readout) /
         static_cast<double>(n);
}

/// Settles the batch with the label clamped at z4, starting from the given
/// feedforward latents, and returns the samples the weight update uses: the
/// final state, or the last M states in mcpc mode.
template <typename T>
std::vector<std::array<BasicTensor<T>, kLatentLayers>> pc_settle_samples(
    const GenerativeChain<T>& gen, const std::array<BasicTensor<T>, kLatentLayers>& feedforward,
    std::span<const int> labels, std::span<const std::size_t> image_indices, const PcTrainConfig& cfg,
    const RngStream& noise_root) {
  LatentState<T> state(feedforward);
  const BasicTensor<T> target = one_hot<T>(labels, kClasses);
  state.clamp(3, target);
  SettleConfig sc = cfg.settle;
  sc.telemetry = false;
  sc.keep_last = cfg.samples();
  if (sc.keep_last > sc.steps + 1) {
    throw std::invalid_argument("mcpc: " + std::to_string(sc.keep_last) + " samples requested from " +
                                std::to_string(sc.steps) + " settle steps");
  }
  std::vector<RngStream> streams;
  if (sc.sigma > 0) streams = noise_streams(noise_root, image_indices, 0);
  auto r = settle(gen, std::move(state), sc, &target, std::span<RngStream>(streams));
  return std::move(r.samples);
}

template <typename T>
std::vector<BasicTensor<T>*> all_parameters(PcnModel<T>& model) {
  return tensor_pointers(model.parameters());
}

template <typename T>
ParamGrads<T> concat_grads(ParamGrads<T> a, ParamGrads<T> b) {
  a.insert(a.end(), std::make_move_iterator(b.begin()), std::make_move_iterator(b.end()));
  return a;
}

/// One epoch of PC training; one optimizer step per batch over all
/// parameters. `opt` must be built for model.parameters().
template <typename T>
EpochStats train_epoch_pc(PcnModel<T>& model, OptimizerState<T>& opt, const Dataset& data, const PcTrainConfig& cfg,
                          std::size_t batch_size, std::uint64_t seed, std::uint64_t epoch) {
  EpochStats st;
  const RngStream noise_epoch = RngStream(seed).derive(0x1A9E, epoch);
  const auto params = all_parameters(model);
  const auto batches = epoch_batches(data.size(), batch_size, seed, epoch);
  std::size_t correct = 0;
  for (std::size_t b = 0; b < batches.size(); ++b) {
    const Dataset batch = data.select(batches[b]);
    const auto trace = encoder_forward_trace(model.encoder, batch.images.template cast<T>(), Mode::train,
                                             &model.encoder);
    const auto samples = pc_settle_samples(model.generative, trace.z, batch.labels, batches[b], cfg, noise_epoch);
    auto g = pc_weight_gradients<T>(model, trace, batch.labels, samples, cfg);
    detail::check_loss(g.readout_loss + g.generative_loss + g.alignment_loss, "loss", b);
    const auto grads = concat_grads(std::move(g.encoder), std::move(g.generative));
    optimizer_step(opt, std::span<BasicTensor<T>* const>(params), std::span<const BasicTensor<T>>(grads));
    const double w = static_cast<double>(batch.size());
    st.readout_loss += g.readout_loss * w;
    st.generative_loss += g.generative_loss * w;
    st.alignment_loss += g.alignment_loss * w;
    correct += g.correct;
    st.samples += batch.size();
  }
  st.batches = batches.size();
  if (st.samples > 0) {
    const double n = static_cast<double>(st.samples);
    st.readout_loss /= n;
    st.generative_loss /= n;
    st.alignment_loss /= n;
    st.accuracy = static_cast<double>(correct) / n;
  }
  return st;
}

// ---------------------------------------------------------------------------
// Backprop (encoder only, CE loss)

template <typename T>
BatchGradients<T> bp_batch_gradients(const Encoder<T>& enc, const BasicTensor<T>& x, std::span<const int> labels,
                                     Encoder<T>* running = nullptr) {
  const std::size_t n = x.extent(0);
  const auto trace = encoder_forward_trace(enc, x, Mode::train, running);
  const BasicTensor<T> target = one_hot<T>(labels, trace.z[3].row_size());
  BatchGradients<T> out;
  for (const T v : cross_entropy(trace.z[3], target)) out.readout_loss += static_cast<double>(v) / n;
  std::array<BasicTensor<T>, kLatentLayers> dz;
  dz[3] = cross_entropy_backward(trace.z[3], target, std::vector<T>(n, static_cast<T>(1.0 / n)));
  out.encoder = encoder_backward(enc, trace, dz);
  out.correct = detail::count_correct(trace.z[3], labels);
  return out;
}

template <typename T>
double bp_objective(const Encoder<T>& enc, const BasicTensor<T>& x, std::span<const int> labels) {
  const auto trace = encoder_forward_trace(enc, x, Mode::train);
  double loss = 0.0;
  for (const T v : cross_entropy(trace.z[3], one_hot<T>(labels, trace.z[3].row_size()))) loss += v;
  return loss / static_cast<double>(x.extent(0));
}

template <typename T>
EpochStats train_epoch_bp(Encoder<T>& enc, OptimizerState<T>& opt, const Dataset& data, std::size_t batch_size,
                          std::uint64_t seed, std::uint64_t epoch) {
  EpochStats st;
  const auto params = tensor_pointers(enc.parameters());
  const auto batches = epoch_batches(data.size(), batch_size, seed, epoch);
  std::size_t correct = 0;
  for (std::size_t b = 0; b < batches.size(); ++b) {
    const Dataset batch = data.select(batches[b]);
    auto g = bp_batch_gradients<T>(enc, batch.images.template cast<T>(), batch.labels, &enc);
    detail::check_loss(g.readout_loss, "loss", b);
    optimizer_step(opt, std::span<BasicTensor<T>* const>(params), std::span<const BasicTensor<T>>(g.encoder));
    st.readout_loss += g.readout_loss * static_cast<double>(batch.size());
    correct += g.correct;
    st.samples += batch.size();
  }
  st.batches = batches.size();
  if (st.samples > 0) {
    st.readout_loss /= static_cast<double>(st.samples);
    st.accuracy = static_cast<double>(correct) / static_cast<double>(st.samples);
  }
  return st;
}

// ---------------------------------------------------------------------------
// Post-hoc decoder: fit the generative chain to a frozen encoder's eval-mode
// activations, teacher-forced from the layer above.
//   loss = mean_i sum_l mean((z^ff_l - g_l(z^ff_{l+1}))^2)

template <typename T>
BatchGradients<T> decoder_batch_gradients(const GenerativeChain<T>& gen,
                                          const std::array<BasicTensor<T>, kLatentLayers>& ff) {
  const std::size_t n = ff[0].extent(0);
  BatchGradients<T> out;
  detail::zero_like(out.generative, gen.parameters());
  const auto p = predict_chain(gen, ff);
  for (int level = 1; level <= 3; ++level) {
    const auto l = static_cast<std::size_t>(level - 1);
    const double per = 1.0 / static_cast<double>(p.error[l].row_size());
    for (const double v : row_mean_of_squares(p.error[l])) out.generative_loss += v / n;
    BasicTensor<T> dpred = p.error[l];
    scale(dpred, static_cast<T>(-2.0 * per / n));
    auto g = generative_backward(gen, level, ff[l + 1], dpred, GradRequest{.input = false, .params = true});
    const std::size_t w = generative_weight_index(level);
    out.generative[w] = std::move(g.weight);
    out.generative[w + 1] = std::move(g.bias);
  }
  return out;
}

template <typename T>
double decoder_objective(const GenerativeChain<T>& gen, const std::array<BasicTensor<T>, kLatentLayers>& ff) {
  double loss = 0.0;
  for (const auto& e : energy_from_errors(predict_chain(gen, ff), ff[3], nullptr)) loss += 2.0 * e.total;
  return loss / static_cast<double>(ff[0].extent(0));
}

template <typename T>
EpochStats train_epoch_decoder(const Encoder<T>& frozen, GenerativeChain<T>& gen, OptimizerState<T>& opt,
                               const Dataset& data, std::size_t batch_size, std::uint64_t seed,
                               std::uint64_t epoch) {
  EpochStats st;
  const auto params = tensor_pointers(gen.parameters());
  const auto batches = epoch_batches(data.size(), batch_size, seed, epoch);
  for (std::size_t b = 0; b < batches.size(); ++b) {
    const Dataset batch = data.select(batches[b]);
    const auto ff = encoder_forward(frozen, batch.images.template cast<T>());
    auto g = decoder_batch_gradients(gen, ff);
    detail::check_loss(g.generative_loss, "reconstruction loss", b);
    optimizer_step(opt, std::span<BasicTensor<T>* const>(params), std::span<const BasicTensor<T>>(g.generative));
    st.generative_loss += g.generative_loss * static_cast<double>(batch.size());
    st.samples += batch.size();
  }
  st.batches = batches.size();
  if (st.samples > 0) st.generative_loss /= static_cast<double>(st.samples);
  return st;
}

}  // namespace pcnprobe
