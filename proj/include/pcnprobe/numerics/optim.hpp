#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pcnprobe/numerics/tensor.hpp"

namespace pcnprobe {

enum class OptimizerKind { adamw, sgd_momentum };

struct OptimizerHyper {
  double learning_rate = 1e-4;
  double weight_decay = 0.0;
  double momentum = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Moment buffers are created lazily on the first step and then pinned to the
/// shapes of the parameters they track.
template <typename T>
struct OptimizerState {
  OptimizerKind kind = OptimizerKind::adamw;
  OptimizerHyper hyper;
  std::vector<BasicTensor<T>> first_moment;   // adamw m, or sgd momentum buffer
  std::vector<BasicTensor<T>> second_moment;  // adamw v
  std::uint64_t steps = 0;
};

template <typename T>
OptimizerState<T> make_adamw(double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
                             double epsilon = 1e-8) {
  OptimizerState<T> s;
  s.kind = OptimizerKind::adamw;
  s.hyper.learning_rate = lr;
  s.hyper.weight_decay = weight_decay;
  s.hyper.beta1 = beta1;
  s.hyper.beta2 = beta2;
  s.hyper.epsilon = epsilon;
  return s;
}

template <typename T>
OptimizerState<T> make_sgd_momentum(double lr, double momentum) {
  OptimizerState<T> s;
  s.kind = OptimizerKind::sgd_momentum;
  s.hyper.learning_rate = lr;
  s.hyper.momentum = momentum;
  return s;
}

namespace detail {

template <typename T>
void check_step_inputs(OptimizerState<T>& state, std::span<BasicTensor<T>* const> params,
                       std::span<const BasicTensor<T>> grads) {
  if (params.size() != grads.size()) throw ShapeError("optimizer: parameter/gradient count mismatch");
  for (std::size_t p = 0; p < params.size(); ++p) {
    require_same_shape(*params[p], grads[p], "optimizer gradient");
    const auto g = grads[p].values();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!std::isfinite(g[i])) {
        throw NonFiniteError("optimizer: non-finite gradient in parameter " + std::to_string(p) + " at element " +
                             std::to_string(i) + " (step " + std::to_string(state.steps + 1) + ")");
      }
    }
  }
  auto init = [&](std::vector<BasicTensor<T>>& buffers) {
    if (buffers.empty()) {
      for (const auto* p : params) buffers.emplace_back(p->shape());
    } else if (buffers.size() != params.size()) {
      throw ShapeError("optimizer: state tracks " + std::to_string(buffers.size()) + " parameters, got " +
                       std::to_string(params.size()));
    } else {
      for (std::size_t p = 0; p < params.size(); ++p) require_same_shape(buffers[p], *params[p], "optimizer state");
    }
  };
  init(state.first_moment);
  if (state.kind == OptimizerKind::adamw) init(state.second_moment);
}

}  // namespace detail

/// AdamW with decoupled weight decay: p <- p * (1 - lr * wd), then the
/// bias-corrected Adam update.
template <typename T>
void adamw_step(OptimizerState<T>& state, std::span<BasicTensor<T>* const> params,
                std::span<const BasicTensor<T>> grads) {
  if (state.kind != OptimizerKind::adamw) throw std::logic_error("adamw_step on non-adamw state");
  detail::check_step_inputs(state, params, grads);
  ++state.steps;
  const auto& h = state.hyper;
  const double t = static_cast<double>(state.steps);
  const double bc1 = 1.0 - std::pow(h.beta1, t);
  const double bc2 = 1.0 - std::pow(h.beta2, t);
  const double decay = 1.0 - h.learning_rate * h.weight_decay;
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& w = *params[p];
    auto& m = state.first_moment[p];
    auto& v = state.second_moment[p];
    const auto& g = grads[p];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i];
      const double mi = h.beta1 * m[i] + (1.0 - h.beta1) * gi;
      const double vi = h.beta2 * v[i] + (1.0 - h.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double update = h.learning_rate * (mi / bc1) / (std::sqrt(vi / bc2) + h.epsilon);
      w[i] = static_cast<T>(static_cast<double>(w[i]) * decay - update);
    }
  }
}

/// buffer <- momentum * buffer + grad; p <- p - lr * buffer.
template <typename T>
void sgd_momentum_step(OptimizerState<T>& state, std::span<BasicTensor<T>* const> params,
                       std::span<const BasicTensor<T>> grads) {
  if (state.kind != OptimizerKind::sgd_momentum) throw std::logic_error("sgd_momentum_step on non-sgd state");
  detail::check_step_inputs(state, params, grads);
  ++state.steps;
  const T lr = static_cast<T>(state.hyper.learning_rate);
  const T mu = static_cast<T>(state.hyper.momentum);
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& w = *params[p];
    auto& b = state.first_moment[p];
    const auto& g = grads[p];
    for (std::size_t i = 0; i < w.size(); ++i) {
      b[i] = mu * b[i] + g[i];
      w[i] -= lr * b[i];
    }
  }
}

template <typename T>
void optimizer_step(OptimizerState<T>& state, std::span<BasicTensor<T>* const> params,
                    std::span<const BasicTensor<T>> grads) {
  if (state.kind == OptimizerKind::adamw) {
    adamw_step(state, params, grads);
  } else {
    sgd_momentum_step(state, params, grads);
  }
}

// Single-tensor conveniences.
template <typename T>
void adamw_step(OptimizerState<T>& state, BasicTensor<T>& param, const BasicTensor<T>& grad) {
  BasicTensor<T>* p[] = {&param};
  adamw_step(state, std::span<BasicTensor<T>* const>(p), std::span<const BasicTensor<T>>(&grad, 1));
}

template <typename T>
void sgd_momentum_step(OptimizerState<T>& state, BasicTensor<T>& param, const BasicTensor<T>& grad) {
  BasicTensor<T>* p[] = {&param};
  sgd_momentum_step(state, std::span<BasicTensor<T>* const>(p), std::span<const BasicTensor<T>>(&grad, 1));
}

}  // namespace pcnprobe
