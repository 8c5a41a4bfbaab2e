#pragma once

// TinyConvPCN = encoder (TinyFFN) + generative chain (TinyDecoder).
//
//   encoder:    x(3,32,32) -conv1,bn1,gelu,pool-> z1(32,16,16)
//                          -conv2,bn2,gelu,pool-> z2(64,8,8)
//                          -fc1,gelu->            z3(256)
//                          -fc2->                 z4(10)   (logits)
//   generative: g3: z4 -> z3 linear; g2: z3 -> z2 linear + reshape;
//               g1: z2 -> z1 nearest upsample x2 then 3x3 conv.

#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "pcnprobe/numerics/ops.hpp"
#include "pcnprobe/numerics/rng.hpp"
#include "pcnprobe/numerics/tensor.hpp"

namespace pcnprobe {

inline constexpr std::size_t kClasses = 10;
inline constexpr std::size_t kLatentLayers = 4;

/// Per-image shapes of z1..z4 (index 0..3) and of the input.
inline const Shape& latent_shape(std::size_t layer) {
  static const std::array<Shape, kLatentLayers> shapes{Shape{32, 16, 16}, Shape{64, 8, 8}, Shape{256},
                                                       Shape{kClasses}};
  return shapes.at(layer);
}
inline const Shape& image_shape() {
  static const Shape s{3, 32, 32};
  return s;
}

inline Shape batched(std::size_t n, const Shape& per_item) {
  Shape s{n};
  s.insert(s.end(), per_item.begin(), per_item.end());
  return s;
}

template <typename T>
struct NamedTensor {
  std::string name;
  BasicTensor<T>* tensor;
};

template <typename T>
struct ConstNamedTensor {
  std::string name;
  const BasicTensor<T>* tensor;
};

/// Gradients aligned with a module's parameters() order.
template <typename T>
using ParamGrads = std::vector<BasicTensor<T>>;

template <typename T>
std::size_t count_elements(const std::vector<ConstNamedTensor<T>>& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor->size();
  return n;
}

namespace detail {

// Kaiming-uniform with a = sqrt(5): U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <typename T>
void fan_in_uniform(BasicTensor<T>& w, std::size_t fan_in, RngStream& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (T& v : w.values()) v = static_cast<T>(rng.uniform(-bound, bound));
}

template <typename T>
std::vector<ConstNamedTensor<T>> as_const(const std::vector<NamedTensor<T>>& in) {
  std::vector<ConstNamedTensor<T>> out;
  for (const auto& p : in) out.push_back({p.name, p.tensor});
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Encoder (TinyFFN)

template <typename T>
struct Encoder {
  BasicTensor<T> conv1_weight{Shape{32, 3, 3, 3}};
  BasicTensor<T> conv1_bias{Shape{32}};
  BatchNorm<T> bn1{32};
  BasicTensor<T> conv2_weight{Shape{64, 32, 3, 3}};
  BasicTensor<T> conv2_bias{Shape{64}};
  BatchNorm<T> bn2{64};
  BasicTensor<T> fc1_weight{Shape{256, 64 * 8 * 8}};
  BasicTensor<T> fc1_bias{Shape{256}};
  BasicTensor<T> fc2_weight{Shape{kClasses, 256}};
  BasicTensor<T> fc2_bias{Shape{kClasses}};

  static Encoder initialised(RngStream rng) {
    Encoder e;
    detail::fan_in_uniform(e.conv1_weight, 3 * 9, rng);
    detail::fan_in_uniform(e.conv2_weight, 32 * 9, rng);
    detail::fan_in_uniform(e.fc1_weight, 64 * 8 * 8, rng);
    detail::fan_in_uniform(e.fc2_weight, 256, rng);
    return e;
  }

  std::vector<NamedTensor<T>> parameters() {
    return {{"conv1.weight", &conv1_weight}, {"conv1.bias", &conv1_bias}, {"bn1.weight", &bn1.gamma},
            {"bn1.bias", &bn1.beta},         {"conv2.weight", &conv2_weight}, {"conv2.bias", &conv2_bias},
            {"bn2.weight", &bn2.gamma},      {"bn2.bias", &bn2.beta},     {"fc1.weight", &fc1_weight},
            {"fc1.bias", &fc1_bias},         {"fc2.weight", &fc2_weight}, {"fc2.bias", &fc2_bias}};
  }
  std::vector<ConstNamedTensor<T>> parameters() const {
    return detail::as_const(const_cast<Encoder*>(this)->parameters());
  }

  /// Non-trainable state (batchnorm running statistics).
  std::vector<NamedTensor<T>> buffers() {
    return {{"bn1.running_mean", &bn1.running_mean},
            {"bn1.running_var", &bn1.running_var},
            {"bn2.running_mean", &bn2.running_mean},
            {"bn2.running_var", &bn2.running_var}};
  }
  std::vector<ConstNamedTensor<T>> buffers() const { return detail::as_const(const_cast<Encoder*>(this)->buffers()); }
};

/// Intermediate values kept for the backward pass.
template <typename T>
struct EncoderTrace {
  BasicTensor<T> input;
  BatchNormCache<T> bn1_cache;
  BasicTensor<T> bn1_out;
  BasicTensor<T> act1;  // gelu(bn1) before pooling
  std::vector<std::uint32_t> pool1_argmax;
  BatchNormCache<T> bn2_cache;
  BasicTensor<T> bn2_out;
  BasicTensor<T> act2;
  std::vector<std::uint32_t> pool2_argmax;
  BasicTensor<T> fc1_pre;
  std::array<BasicTensor<T>, kLatentLayers> z;  // z1..z4, batched
};

/// In train mode batch statistics are used and, when `running` is given,
/// folded into its batchnorm running statistics.
template <typename T>
EncoderTrace<T> encoder_forward_trace(const Encoder<T>& enc, const BasicTensor<T>& x, Mode mode,
                                      Encoder<T>* running = nullptr) {
  if (x.rank() != 4 || Shape(x.shape().begin() + 1, x.shape().end()) != image_shape()) {
    throw ShapeError("encoder: expected (N,3,32,32) input, got " + shape_string(x.shape()));
  }
  EncoderTrace<T> t;
  t.input = x;
  t.bn1_out = batchnorm_forward(conv2d_forward(x, enc.conv1_weight, enc.conv1_bias), enc.bn1, mode, &t.bn1_cache,
                                running ? &running->bn1 : nullptr);
  t.act1 = gelu_forward(t.bn1_out);
  auto p1 = maxpool2x2_forward(t.act1);
  t.pool1_argmax = std::move(p1.argmax);
  t.z[0] = std::move(p1.output);
  t.bn2_out = batchnorm_forward(conv2d_forward(t.z[0], enc.conv2_weight, enc.conv2_bias), enc.bn2, mode,
                                &t.bn2_cache, running ? &running->bn2 : nullptr);
  t.act2 = gelu_forward(t.bn2_out);
  auto p2 = maxpool2x2_forward(t.act2);
  t.pool2_argmax = std::move(p2.argmax);
  t.z[1] = std::move(p2.output);
  t.fc1_pre = linear_forward(t.z[1], enc.fc1_weight, enc.fc1_bias);
  t.z[2] = gelu_forward(t.fc1_pre);
  t.z[3] = linear_forward(t.z[2], enc.fc2_weight, enc.fc2_bias);
  return t;
}

/// Feedforward latents z1..z4 in evaluation mode (frozen batchnorm statistics).
template <typename T>
std::array<BasicTensor<T>, kLatentLayers> encoder_forward(const Encoder<T>& enc, const BasicTensor<T>& x) {
  auto t = encoder_forward_trace(enc, x, Mode::eval);
  return std::move(t.z);
}

/// Backpropagates gradients arriving at any of z1..z4 (empty tensors mean
/// zero) through the encoder. Returns parameter gradients in parameters()
/// order.
template <typename T>
ParamGrads<T> encoder_backward(const Encoder<T>& enc, const EncoderTrace<T>& t,
                               const std::array<BasicTensor<T>, kLatentLayers>& dz) {
  auto add_into = [](BasicTensor<T>& acc, const BasicTensor<T>& g) {
    if (g.empty()) return;
    if (acc.empty()) {
      acc = g;
    } else {
      axpy(T{1}, g, acc);
    }
  };
  ParamGrads<T> grads(12);
  const std::size_t n = t.input.extent(0);

  BasicTensor<T> d4 = dz[3].empty() ? BasicTensor<T>(t.z[3].shape()) : dz[3];
  auto fc2 = linear_backward(t.z[2], enc.fc2_weight, d4);
  grads[10] = std::move(fc2.weight);
  grads[11] = std::move(fc2.bias);

  BasicTensor<T> d3 = std::move(fc2.input);
  add_into(d3, dz[2]);
  BasicTensor<T> dpre = gelu_backward(t.fc1_pre, d3);
  auto fc1 = linear_backward(t.z[1], enc.fc1_weight, dpre);
  grads[8] = std::move(fc1.weight);
  grads[9] = std::move(fc1.bias);

  BasicTensor<T> d2 = std::move(fc1.input).reshaped(batched(n, latent_shape(1)));
  add_into(d2, dz[1]);
  BasicTensor<T> dact2 = maxpool2x2_backward(t.act2.shape(), t.pool2_argmax, d2);
  auto bn2 = batchnorm_backward(t.bn2_cache, enc.bn2, gelu_backward(t.bn2_out, dact2));
  grads[6] = std::move(bn2.gamma);
  grads[7] = std::move(bn2.beta);
  auto conv2 = conv2d_backward(t.z[0], enc.conv2_weight, bn2.input);
  grads[4] = std::move(conv2.kernel);
  grads[5] = std::move(conv2.bias);

  BasicTensor<T> d1 = std::move(conv2.input);
  add_into(d1, dz[0]);
  BasicTensor<T> dact1 = maxpool2x2_backward(t.act1.shape(), t.pool1_argmax, d1);
  auto bn1 = batchnorm_backward(t.bn1_cache, enc.bn1, gelu_backward(t.bn1_out, dact1));
  grads[2] = std::move(bn1.gamma);
  grads[3] = std::move(bn1.beta);
  auto conv1 = conv2d_backward(t.input, enc.conv1_weight, bn1.input, GradRequest{.input = false, .params = true});
  grads[0] = std::move(conv1.kernel);
  grads[1] = std::move(conv1.bias);
  return grads;
}

// ---------------------------------------------------------------------------
// Generative chain (TinyDecoder)

template <typename T>
struct GenerativeChain {
  BasicTensor<T> g3_weight{Shape{256, kClasses}};
  BasicTensor<T> g3_bias{Shape{256}};
  BasicTensor<T> g2_weight{Shape{64 * 8 * 8, 256}};
  BasicTensor<T> g2_bias{Shape{64 * 8 * 8}};
  BasicTensor<T> g1_weight{Shape{32, 64, 3, 3}};
  BasicTensor<T> g1_bias{Shape{32}};

  static GenerativeChain initialised(RngStream rng) {
    GenerativeChain g;
    detail::fan_in_uniform(g.g3_weight, kClasses, rng);
    detail::fan_in_uniform(g.g2_weight, 256, rng);
    detail::fan_in_uniform(g.g1_weight, 64 * 9, rng);
    return g;
  }

  std::vector<NamedTensor<T>> parameters() {
    return {{"g3.weight", &g3_weight}, {"g3.bias", &g3_bias}, {"g2.weight", &g2_weight},
            {"g2.bias", &g2_bias},     {"g1.weight", &g1_weight}, {"g1.bias", &g1_bias}};
  }
  std::vector<ConstNamedTensor<T>> parameters() const {
    return detail::as_const(const_cast<GenerativeChain*>(this)->parameters());
  }
};

/// Index into the generative chain's parameters() of level l's weight.
inline std::size_t generative_weight_index(int level) { return static_cast<std::size_t>(2 * (3 - level)); }

inline void check_level(int level) {
  if (level < 1 || level > 3) throw std::invalid_argument("generative level must be 1, 2 or 3, got " + std::to_string(level));
}

/// Top-down prediction of z_level from z_{level+1} (batched).
template <typename T>
BasicTensor<T> generative_predict(const GenerativeChain<T>& gen, int level, const BasicTensor<T>& upper) {
  check_level(level);
  const Shape& above = latent_shape(static_cast<std::size_t>(level));
  if (upper.rank() != above.size() + 1 || Shape(upper.shape().begin() + 1, upper.shape().end()) != above) {
    throw ShapeError("generative_predict level " + std::to_string(level) + ": expected upper latent of shape " +
                     shape_string(above) + " per item, got " + shape_string(upper.shape()));
  }
  const std::size_t n = upper.extent(0);
  switch (level) {
    case 3:
      return linear_forward(upper, gen.g3_weight, gen.g3_bias);
    case 2:
      return linear_forward(upper, gen.g2_weight, gen.g2_bias).reshaped(batched(n, latent_shape(1)));
    default:
      return upconv2x_forward(upper, gen.g1_weight, gen.g1_bias);
  }
}

template <typename T>
struct PredictGrads {
  BasicTensor<T> upper;  // gradient with respect to z_{level+1}
  BasicTensor<T> weight;
  BasicTensor<T> bias;
};

template <typename T>
PredictGrads<T> generative_backward(const GenerativeChain<T>& gen, int level, const BasicTensor<T>& upper,
                                    const BasicTensor<T>& dpred, GradRequest req = {}) {
  check_level(level);
  const std::size_t n = upper.extent(0);
  PredictGrads<T> out;
  switch (level) {
    case 3: {
      auto g = linear_backward(upper, gen.g3_weight, dpred, req);
      out = {std::move(g.input), std::move(g.weight), std::move(g.bias)};
      break;
    }
    case 2: {
      auto g = linear_backward(upper, gen.g2_weight, dpred.reshaped(Shape{n, 64 * 8 * 8}), req);
      out = {std::move(g.input), std::move(g.weight), std::move(g.bias)};
      break;
    }
    default: {
      auto g = upconv2x_backward(upper, gen.g1_weight, dpred, req);
      out = {std::move(g.input), std::move(g.kernel), std::move(g.bias)};
      break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// TinyConvPCN

template <typename T>
struct PcnModel {
  Encoder<T> encoder;
  GenerativeChain<T> generative;

  static PcnModel initialised(std::uint64_t seed) {
    const RngStream root(seed);
    return PcnModel{Encoder<T>::initialised(root.derive(1)), GenerativeChain<T>::initialised(root.derive(2))};
  }

  std::vector<NamedTensor<T>> parameters() {
    auto out = prefixed("encoder.", encoder.parameters());
    auto gen = prefixed("generative.", generative.parameters());
    out.insert(out.end(), gen.begin(), gen.end());
    return out;
  }
  std::vector<ConstNamedTensor<T>> parameters() const {
    return detail::as_const(const_cast<PcnModel*>(this)->parameters());
  }
  std::vector<NamedTensor<T>> buffers() { return prefixed("encoder.", encoder.buffers()); }

 private:
  static std::vector<NamedTensor<T>> prefixed(const std::string& prefix, std::vector<NamedTensor<T>> in) {
    for (auto& p : in) p.name = prefix + p.name;
    return in;
  }
};

template <typename T>
std::size_t param_count(const Encoder<T>& m) {
  return count_elements(m.parameters());
}
template <typename T>
std::size_t param_count(const GenerativeChain<T>& m) {
  return count_elements(m.parameters());
}
template <typename T>
std::size_t param_count(const PcnModel<T>& m) {
  return count_elements(m.parameters());
}

template <typename T>
std::vector<BasicTensor<T>*> tensor_pointers(const std::vector<NamedTensor<T>>& named) {
  std::vector<BasicTensor<T>*> out;
  for (const auto& p : named) out.push_back(p.tensor);
  return out;
}

/// Element-wise conversion of every parameter and buffer, e.g. a float model
/// into its exact double counterpart for oracle checks.
template <typename U, typename T>
PcnModel<U> cast_model(const PcnModel<T>& src) {
  PcnModel<U> out;
  const auto from = src.parameters();
  auto to = out.parameters();
  for (std::size_t i = 0; i < from.size(); ++i) *to[i].tensor = from[i].tensor->template cast<U>();
  const auto bfrom = src.encoder.buffers();
  auto bto = out.encoder.buffers();
  for (std::size_t i = 0; i < bfrom.size(); ++i) *bto[i].tensor = bfrom[i].tensor->template cast<U>();
  return out;
}

}  // namespace pcnprobe
