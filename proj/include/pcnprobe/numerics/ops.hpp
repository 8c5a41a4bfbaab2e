#pragma once

// Forward operations and their analytic gradients. Batched inputs carry the
// batch on the leading axis; images are (N, C, H, W).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <type_traits>
#include <utility>
#include <vector>

#include "pcnprobe/numerics/gemm.hpp"
#include "pcnprobe/numerics/tensor.hpp"

namespace pcnprobe {

// ---------------------------------------------------------------------------
// linear: y = x W^T + b, W is (out, in)

template <typename T>
BasicTensor<T> linear_forward(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias) {
  if (weight.rank() != 2) throw ShapeError("linear: weight must be rank 2");
  const std::size_t out = weight.extent(0), in = weight.extent(1);
  if (x.rank() < 1 || x.row_size() != in) {
    throw ShapeError("linear: input " + shape_string(x.shape()) + " incompatible with weight " +
                     shape_string(weight.shape()));
  }
  require_shape(bias, Shape{out}, "linear bias");
  const std::size_t n = x.extent(0);
  BasicTensor<T> y(Shape{n, out});
  for (std::size_t i = 0; i < n; ++i) std::copy(bias.data(), bias.data() + out, y.data() + i * out);
  detail::gemm(detail::Trans::no, detail::Trans::yes, n, out, in, T{1}, x.data(), weight.data(), T{1}, y.data());
  return y;
}

template <typename T>
struct LinearGrads {
  BasicTensor<T> input;
  BasicTensor<T> weight;
  BasicTensor<T> bias;
};

struct GradRequest {
  bool input = true;
  bool params = true;
};

template <typename T>
LinearGrads<T> linear_backward(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& dy,
                               GradRequest req = {}) {
  const std::size_t out = weight.extent(0), in = weight.extent(1), n = x.extent(0);
  require_shape(dy, Shape{n, out}, "linear backward dy");
  LinearGrads<T> g;
  if (req.input) {
    g.input = BasicTensor<T>(x.shape());
    detail::gemm(detail::Trans::no, detail::Trans::no, n, in, out, T{1}, dy.data(), weight.data(), T{0},
                 g.input.data());
  }
  if (req.params) {
    g.weight = BasicTensor<T>(weight.shape());
    detail::gemm(detail::Trans::yes, detail::Trans::no, out, in, n, T{1}, dy.data(), x.data(), T{0},
                 g.weight.data());
    g.bias = BasicTensor<T>(Shape{out});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < out; ++j) g.bias[j] += dy[i * out + j];
  }
  return g;
}

// ---------------------------------------------------------------------------
// conv2d, 3x3 kernel, padding 1, stride 1 (im2col + GEMM)

namespace detail {

inline constexpr std::size_t kKernel = 3;

template <typename T>
void im2col3x3(const T* image, std::size_t channels, std::size_t h, std::size_t w, T* col) {
  const std::size_t hw = h * w;
  for (std::size_t c = 0; c < channels; ++c) {
    const T* plane = image + c * hw;
    for (std::size_t ky = 0; ky < kKernel; ++ky) {
      for (std::size_t kx = 0; kx < kKernel; ++kx) {
        T* dst = col + ((c * kKernel + ky) * kKernel + kx) * hw;
        for (std::size_t y = 0; y < h; ++y) {
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + ky) - 1;
          T* row = dst + y * w;
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) {
            std::fill(row, row + w, T{0});
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(sy) * w;
          for (std::size_t x = 0; x < w; ++x) {
            const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(x + kx) - 1;
            row[x] = (sx < 0 || sx >= static_cast<std::ptrdiff_t>(w)) ? T{0} : src[sx];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im3x3(const T* col, std::size_t channels, std::size_t h, std::size_t w, T* image) {
  const std::size_t hw = h * w;
  std::fill(image, image + channels * hw, T{0});
  for (std::size_t c = 0; c < channels; ++c) {
    T* plane = image + c * hw;
    for (std::size_t ky = 0; ky < kKernel; ++ky) {
      for (std::size_t kx = 0; kx < kKernel; ++kx) {
        const T* src = col + ((c * kKernel + ky) * kKernel + kx) * hw;
        for (std::size_t y = 0; y < h; ++y) {
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + ky) - 1;
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
          T* dst = plane + static_cast<std::size_t>(sy) * w;
          const T* row = src + y * w;
          for (std::size_t x = 0; x < w; ++x) {
            const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(x + kx) - 1;
            if (sx >= 0 && sx < static_cast<std::ptrdiff_t>(w)) dst[sx] += row[x];
          }
        }
      }
    }
  }
}

template <typename T>
void check_conv_shapes(const BasicTensor<T>& x, const BasicTensor<T>& kernel, const BasicTensor<T>& bias) {
  if (kernel.rank() != 4 || kernel.extent(2) != kKernel || kernel.extent(3) != kKernel) {
    throw ShapeError("conv2d: kernel must be (C_out, C_in, 3, 3), got " + shape_string(kernel.shape()));
  }
  if (x.rank() != 4) throw ShapeError("conv2d: input must be (N, C, H, W), got " + shape_string(x.shape()));
  if (x.extent(1) != kernel.extent(1)) {
    throw ShapeError("conv2d: input has " + std::to_string(x.extent(1)) + " channels, kernel expects " +
                     std::to_string(kernel.extent(1)));
  }
  require_shape(bias, Shape{kernel.extent(0)}, "conv2d bias");
}

}  // namespace detail

template <typename T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& x, const BasicTensor<T>& kernel, const BasicTensor<T>& bias) {
  detail::check_conv_shapes(x, kernel, bias);
  const std::size_t n = x.extent(0), cin = x.extent(1), h = x.extent(2), w = x.extent(3);
  const std::size_t cout = kernel.extent(0), hw = h * w, patch = cin * 9;
  BasicTensor<T> y(Shape{n, cout, h, w});
  std::vector<T> col(patch * hw);
  for (std::size_t i = 0; i < n; ++i) {
    detail::im2col3x3(x.data() + i * cin * hw, cin, h, w, col.data());
    T* out = y.data() + i * cout * hw;
    for (std::size_t c = 0; c < cout; ++c) std::fill(out + c * hw, out + (c + 1) * hw, bias[c]);
    detail::gemm(detail::Trans::no, detail::Trans::no, cout, hw, patch, T{1}, kernel.data(), col.data(), T{1}, out);
  }
  return y;
}

template <typename T>
struct ConvGrads {
  BasicTensor<T> input;
  BasicTensor<T> kernel;
  BasicTensor<T> bias;
};

template <typename T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& x, const BasicTensor<T>& kernel, const BasicTensor<T>& dy,
                             GradRequest req = {}) {
  const std::size_t n = x.extent(0), cin = x.extent(1), h = x.extent(2), w = x.extent(3);
  const std::size_t cout = kernel.extent(0), hw = h * w, patch = cin * 9;
  require_shape(dy, Shape{n, cout, h, w}, "conv2d backward dy");
  ConvGrads<T> g;
  std::vector<T> col(patch * hw);
  if (req.input) g.input = BasicTensor<T>(x.shape());
  if (req.params) {
    g.kernel = BasicTensor<T>(kernel.shape());
    g.bias = BasicTensor<T>(Shape{cout});
  }
  for (std::size_t i = 0; i < n; ++i) {
    const T* dyi = dy.data() + i * cout * hw;
    if (req.params) {
      detail::im2col3x3(x.data() + i * cin * hw, cin, h, w, col.data());
      detail::gemm(detail::Trans::no, detail::Trans::yes, cout, patch, hw, T{1}, dyi, col.data(), T{1},
                   g.kernel.data());
      for (std::size_t c = 0; c < cout; ++c) {
        T acc{0};
        for (std::size_t p = 0; p < hw; ++p) acc += dyi[c * hw + p];
        g.bias[c] += acc;
      }
    }
    if (req.input) {
      detail::gemm(detail::Trans::yes, detail::Trans::no, patch, hw, cout, T{1}, kernel.data(), dyi, T{0},
                   col.data());
      detail::col2im3x3(col.data(), cin, h, w, g.input.data() + i * cin * hw);
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// batchnorm over (N, H, W) per channel

enum class Mode { train, eval };

template <typename T>
struct BatchNorm {
  BasicTensor<T> gamma;
  BasicTensor<T> beta;
  BasicTensor<T> running_mean;
  BasicTensor<T> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  BatchNorm() = default;
  explicit BatchNorm(std::size_t channels)
      : gamma(Shape{channels}, T{1}),
        beta(Shape{channels}, T{0}),
        running_mean(Shape{channels}, T{0}),
        running_var(Shape{channels}, T{1}) {}

  std::size_t channels() const { return gamma.size(); }
};

template <typename T>
struct BatchNormCache {
  Mode mode = Mode::eval;
  BasicTensor<T> normalized;  // xhat
  std::vector<T> inv_std;
};

template <typename T>
struct BatchNormGrads {
  BasicTensor<T> input;
  BasicTensor<T> gamma;
  BasicTensor<T> beta;
};

/// In train mode uses batch statistics and, when `running` is given, folds
/// them into its running statistics (unbiased variance); in eval mode uses
/// the frozen running statistics.
template <typename T>
BasicTensor<T> batchnorm_forward(const BasicTensor<T>& x, const BatchNorm<T>& bn, Mode mode,
                                 BatchNormCache<std::type_identity_t<T>>* cache,
                                 BatchNorm<std::type_identity_t<T>>* running) {
  if (x.rank() != 4 || x.extent(1) != bn.channels()) {
    throw ShapeError("batchnorm: input " + shape_string(x.shape()) + " vs " + std::to_string(bn.channels()) +
                     " channels");
  }
  const std::size_t n = x.extent(0), c = x.extent(1), hw = x.extent(2) * x.extent(3);
  const double count = static_cast<double>(n * hw);
  std::vector<T> mean(c), inv_std(c);
  if (mode == Mode::train) {
    if (n * hw < 2) throw ShapeError("batchnorm: train mode needs more than one value per channel");
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const T* p = x.data() + (i * c + ch) * hw;
        for (std::size_t k = 0; k < hw; ++k) s += p[k];
      }
      const double mu = s / count;
      double ss = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const T* p = x.data() + (i * c + ch) * hw;
        for (std::size_t k = 0; k < hw; ++k) {
          const double d = p[k] - mu;
          ss += d * d;
        }
      }
      const double var = ss / count;
      mean[ch] = static_cast<T>(mu);
      inv_std[ch] = static_cast<T>(1.0 / std::sqrt(var + bn.eps));
      if (running) {
        const double m = running->momentum;
        running->running_mean[ch] = static_cast<T>((1.0 - m) * running->running_mean[ch] + m * mu);
        running->running_var[ch] = static_cast<T>((1.0 - m) * running->running_var[ch] + m * ss / (count - 1.0));
      }
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = bn.running_mean[ch];
      inv_std[ch] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(bn.running_var[ch]) + bn.eps));
    }
  }
  BasicTensor<T> y(x.shape());
  BasicTensor<T> xhat;
  if (cache) xhat = BasicTensor<T>(x.shape());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (i * c + ch) * hw;
      for (std::size_t k = 0; k < hw; ++k) {
        const T xh = (x[off + k] - mean[ch]) * inv_std[ch];
        if (cache) xhat[off + k] = xh;
        y[off + k] = bn.gamma[ch] * xh + bn.beta[ch];
      }
    }
  }
  if (cache) {
    cache->mode = mode;
    cache->normalized = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

template <typename T>
BasicTensor<T> batchnorm_forward(const BasicTensor<T>& x, BatchNorm<T>& bn, Mode mode,
                                 BatchNormCache<std::type_identity_t<T>>* cache) {
  return batchnorm_forward(x, std::as_const(bn), mode, cache, mode == Mode::train ? &bn : nullptr);
}

template <typename T>
BatchNormGrads<T> batchnorm_backward(const BatchNormCache<T>& cache, const BatchNorm<T>& bn,
                                     const BasicTensor<T>& dy) {
  require_same_shape(dy, cache.normalized, "batchnorm backward");
  const std::size_t n = dy.extent(0), c = dy.extent(1), hw = dy.extent(2) * dy.extent(3);
  const double count = static_cast<double>(n * hw);
  BatchNormGrads<T> g{BasicTensor<T>(dy.shape()), BasicTensor<T>(Shape{c}), BasicTensor<T>(Shape{c})};
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t off = (i * c + ch) * hw;
      for (std::size_t k = 0; k < hw; ++k) {
        sum_dy += dy[off + k];
        sum_dy_xhat += static_cast<double>(dy[off + k]) * cache.normalized[off + k];
      }
    }
    g.gamma[ch] = static_cast<T>(sum_dy_xhat);
    g.beta[ch] = static_cast<T>(sum_dy);
    const double scale = static_cast<double>(bn.gamma[ch]) * cache.inv_std[ch];
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t off = (i * c + ch) * hw;
      for (std::size_t k = 0; k < hw; ++k) {
        if (cache.mode == Mode::train) {
          g.input[off + k] = static_cast<T>(
              scale * (dy[off + k] - sum_dy / count - cache.normalized[off + k] * sum_dy_xhat / count));
        } else {
          g.input[off + k] = static_cast<T>(scale * dy[off + k]);
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// gelu (exact, erf form)

template <typename T>
BasicTensor<T> gelu_forward(const BasicTensor<T>& x) {
  BasicTensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T v = x[i];
    y[i] = T{0.5} * v * (T{1} + std::erf(v * static_cast<T>(std::numbers::sqrt2 / 2)));
  }
  return y;
}

template <typename T>
T gelu_derivative(T v) {
  const T cdf = T{0.5} * (T{1} + std::erf(v * static_cast<T>(std::numbers::sqrt2 / 2)));
  const T pdf = std::exp(T{-0.5} * v * v) * static_cast<T>(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
  return cdf + v * pdf;
}

template <typename T>
BasicTensor<T> gelu_backward(const BasicTensor<T>& x, const BasicTensor<T>& dy) {
  require_same_shape(x, dy, "gelu backward");
  BasicTensor<T> dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = dy[i] * gelu_derivative(x[i]);
  return dx;
}

// ---------------------------------------------------------------------------
// maxpool 2x2, stride 2. Ties resolve to the first element in scan order.

template <typename T>
struct MaxPoolResult {
  BasicTensor<T> output;
  std::vector<std::uint32_t> argmax;  // flat input index per output element
};

template <typename T>
MaxPoolResult<T> maxpool2x2_forward(const BasicTensor<T>& x) {
  if (x.rank() != 4 || x.extent(2) % 2 || x.extent(3) % 2) {
    throw ShapeError("maxpool2x2: need (N, C, H, W) with even H and W, got " + shape_string(x.shape()));
  }
  const std::size_t n = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
  const std::size_t oh = h / 2, ow = w / 2;
  MaxPoolResult<T> r{BasicTensor<T>(Shape{n, c, oh, ow}), std::vector<std::uint32_t>(n * c * oh * ow)};
  std::size_t o = 0;
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const std::size_t base = plane * h * w;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx, ++o) {
        std::size_t best = base + 2 * y * w + 2 * xx;
        const std::size_t cands[3] = {best + 1, best + w, best + w + 1};
        for (std::size_t cand : cands)
          if (x[cand] > x[best]) best = cand;
        r.output[o] = x[best];
        r.argmax[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
  return r;
}

template <typename T>
BasicTensor<T> maxpool2x2_backward(const Shape& input_shape, const std::vector<std::uint32_t>& argmax,
                                   const BasicTensor<T>& dy) {
  if (dy.size() != argmax.size()) throw ShapeError("maxpool2x2 backward: gradient/argmax size mismatch");
  BasicTensor<T> dx(input_shape);
  for (std::size_t o = 0; o < argmax.size(); ++o) dx[argmax[o]] += dy[o];
  return dx;
}

// ---------------------------------------------------------------------------
// nearest-neighbour upsample x2

template <typename T>
BasicTensor<T> upsample2x_forward(const BasicTensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("upsample2x: need (N, C, H, W), got " + shape_string(x.shape()));
  const std::size_t n = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
  BasicTensor<T> y(Shape{n, c, 2 * h, 2 * w});
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const T* src = x.data() + plane * h * w;
    T* dst = y.data() + plane * 4 * h * w;
    for (std::size_t yy = 0; yy < 2 * h; ++yy)
      for (std::size_t xx = 0; xx < 2 * w; ++xx) dst[yy * 2 * w + xx] = src[(yy / 2) * w + xx / 2];
  }
  return y;
}

template <typename T>
BasicTensor<T> upsample2x_backward(const BasicTensor<T>& dy) {
  if (dy.rank() != 4 || dy.extent(2) % 2 || dy.extent(3) % 2) {
    throw ShapeError("upsample2x backward: bad gradient shape " + shape_string(dy.shape()));
  }
  const std::size_t n = dy.extent(0), c = dy.extent(1), h = dy.extent(2) / 2, w = dy.extent(3) / 2;
  BasicTensor<T> dx(Shape{n, c, h, w});
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const T* src = dy.data() + plane * 4 * h * w;
    T* dst = dx.data() + plane * h * w;
    for (std::size_t yy = 0; yy < 2 * h; ++yy)
      for (std::size_t xx = 0; xx < 2 * w; ++xx) dst[(yy / 2) * w + xx / 2] += src[yy * 2 * w + xx];
  }
  return dx;
}

// ---------------------------------------------------------------------------
// upsample x2 followed by conv 3x3 pad 1, fused.
//
// Output pixel (2y+a, 2x+b) only sees a 2x2 neighbourhood of the low-res
// input, so each of the four output phases is a 2x2 convolution on the
// low-res grid with taps summed from the 3x3 kernel.

namespace detail {

// Kernel rows ky folded into phase tap ty: phase 0 -> {0}, {1,2}; phase 1 -> {0,1}, {2}.
inline constexpr std::size_t kFoldBegin[2][2] = {{0, 1}, {0, 2}};
inline constexpr std::size_t kFoldEnd[2][2] = {{1, 3}, {2, 3}};

template <typename T>
BasicTensor<T> phase_kernel(const BasicTensor<T>& kernel, std::size_t a, std::size_t b) {
  const std::size_t cout = kernel.extent(0), cin = kernel.extent(1);
  BasicTensor<T> out(Shape{cout, cin * 4});
  for (std::size_t oc = 0; oc < cout; ++oc)
    for (std::size_t ic = 0; ic < cin; ++ic)
      for (std::size_t ty = 0; ty < 2; ++ty)
        for (std::size_t tx = 0; tx < 2; ++tx) {
          T acc{0};
          for (std::size_t ky = kFoldBegin[a][ty]; ky < kFoldEnd[a][ty]; ++ky)
            for (std::size_t kx = kFoldBegin[b][tx]; kx < kFoldEnd[b][tx]; ++kx)
              acc += kernel[((oc * cin + ic) * 3 + ky) * 3 + kx];
          out[oc * cin * 4 + ic * 4 + ty * 2 + tx] = acc;
        }
  return out;
}

template <typename T>
void unfold_phase_kernel(const T* dphase, std::size_t cout, std::size_t cin, std::size_t a, std::size_t b,
                         T* dkernel) {
  for (std::size_t oc = 0; oc < cout; ++oc)
    for (std::size_t ic = 0; ic < cin; ++ic)
      for (std::size_t ty = 0; ty < 2; ++ty)
        for (std::size_t tx = 0; tx < 2; ++tx) {
          const T g = dphase[oc * cin * 4 + ic * 4 + ty * 2 + tx];
          for (std::size_t ky = kFoldBegin[a][ty]; ky < kFoldEnd[a][ty]; ++ky)
            for (std::size_t kx = kFoldBegin[b][tx]; kx < kFoldEnd[b][tx]; ++kx)
              dkernel[((oc * cin + ic) * 3 + ky) * 3 + kx] += g;
        }
}

// col is (cin * 4, n * h * w); the low-res source of tap (ty, tx) in phase
// (a, b) is offset by (ty - 1 + a, tx - 1 + b).
struct TapWindow {
  std::size_t y0, y1, x0, x1;  // destination range with an in-bounds source
  std::ptrdiff_t dy, dx;
};

inline TapWindow tap_window(std::size_t h, std::size_t w, std::size_t a, std::size_t b, std::size_t ty,
                            std::size_t tx) {
  TapWindow t{};
  t.dy = static_cast<std::ptrdiff_t>(ty + a) - 1;
  t.dx = static_cast<std::ptrdiff_t>(tx + b) - 1;
  t.y0 = t.dy < 0 ? 1 : 0;
  t.y1 = t.dy > 0 ? h - 1 : h;
  t.x0 = t.dx < 0 ? 1 : 0;
  t.x1 = t.dx > 0 ? w - 1 : w;
  return t;
}

template <typename T>
void phase_im2col(const T* x, std::size_t n, std::size_t cin, std::size_t h, std::size_t w, std::size_t a,
                  std::size_t b, T* col) {
  const std::size_t hw = h * w, cols = n * hw;
  for (std::size_t ty = 0; ty < 2; ++ty)
    for (std::size_t tx = 0; tx < 2; ++tx) {
      const TapWindow t = tap_window(h, w, a, b, ty, tx);
      for (std::size_t ic = 0; ic < cin; ++ic)
        for (std::size_t i = 0; i < n; ++i) {
          const T* plane = x + (i * cin + ic) * hw;
          T* dst = col + (ic * 4 + ty * 2 + tx) * cols + i * hw;
          if (t.y0 == 1) std::fill(dst, dst + w, T{0});
          if (t.y1 + 1 == h) std::fill(dst + (h - 1) * w, dst + hw, T{0});
          for (std::size_t y = t.y0; y < t.y1; ++y) {
            T* row = dst + y * w;
            const T* src = plane + static_cast<std::ptrdiff_t>(y) * static_cast<std::ptrdiff_t>(w) +
                           t.dy * static_cast<std::ptrdiff_t>(w) + t.dx;
            if (t.x0 == 1) row[0] = T{0};
            if (t.x1 + 1 == w) row[w - 1] = T{0};
            std::copy(src + t.x0, src + t.x1, row + t.x0);
          }
        }
    }
}

template <typename T>
void phase_col2im(const T* col, std::size_t n, std::size_t cin, std::size_t h, std::size_t w, std::size_t a,
                  std::size_t b, T* dx) {
  const std::size_t hw = h * w, cols = n * hw;
  for (std::size_t ty = 0; ty < 2; ++ty)
    for (std::size_t tx = 0; tx < 2; ++tx) {
      const TapWindow t = tap_window(h, w, a, b, ty, tx);
      for (std::size_t ic = 0; ic < cin; ++ic)
        for (std::size_t i = 0; i < n; ++i) {
          T* plane = dx + (i * cin + ic) * hw;
          const T* src = col + (ic * 4 + ty * 2 + tx) * cols + i * hw;
          for (std::size_t y = t.y0; y < t.y1; ++y) {
            const T* row = src + y * w;
            T* dst = plane + static_cast<std::ptrdiff_t>(y) * static_cast<std::ptrdiff_t>(w) +
                     t.dy * static_cast<std::ptrdiff_t>(w) + t.dx;
            for (std::size_t xx = t.x0; xx < t.x1; ++xx) dst[xx] += row[xx];
          }
        }
    }
}

}  // namespace detail

namespace detail {

// Images per GEMM so the unfolded input stays cache resident.
inline std::size_t upconv_chunk(std::size_t cin, std::size_t hw) {
  return std::max<std::size_t>(1, (std::size_t{1} << 18) / (cin * 4 * hw));
}

}  // namespace detail

/// Equals conv2d_forward(upsample2x_forward(x), kernel, bias).
template <typename T>
BasicTensor<T> upconv2x_forward(const BasicTensor<T>& x, const BasicTensor<T>& kernel, const BasicTensor<T>& bias) {
  detail::check_conv_shapes(x, kernel, bias);
  const std::size_t n = x.extent(0), cin = x.extent(1), h = x.extent(2), w = x.extent(3), hw = h * w;
  const std::size_t cout = kernel.extent(0), chunk = detail::upconv_chunk(cin, hw);
  std::array<BasicTensor<T>, 4> pk;
  for (std::size_t p = 0; p < 4; ++p) pk[p] = detail::phase_kernel(kernel, p / 2, p % 2);
  BasicTensor<T> y(Shape{n, cout, 2 * h, 2 * w});
  std::vector<T> col(cin * 4 * chunk * hw), out(cout * chunk * hw);
  for (std::size_t i0 = 0; i0 < n; i0 += chunk) {
    const std::size_t m = std::min(chunk, n - i0), cols = m * hw;
    for (std::size_t p = 0; p < 4; ++p) {
      const std::size_t a = p / 2, b = p % 2;
      detail::phase_im2col(x.data() + i0 * cin * hw, m, cin, h, w, a, b, col.data());
      detail::gemm(detail::Trans::no, detail::Trans::no, cout, cols, cin * 4, T{1}, pk[p].data(), col.data(), T{0},
                   out.data());
      for (std::size_t oc = 0; oc < cout; ++oc)
        for (std::size_t i = 0; i < m; ++i) {
          const T* src = out.data() + oc * cols + i * hw;
          T* dst = y.data() + ((i0 + i) * cout + oc) * 4 * hw + a * 2 * w + b;
          for (std::size_t yy = 0; yy < h; ++yy)
            for (std::size_t xx = 0; xx < w; ++xx) dst[yy * 4 * w + 2 * xx] = src[yy * w + xx] + bias[oc];
        }
    }
  }
  return y;
}

/// Gradients of upconv2x_forward; `input` has the low-res shape of x.
template <typename T>
ConvGrads<T> upconv2x_backward(const BasicTensor<T>& x, const BasicTensor<T>& kernel, const BasicTensor<T>& dy,
                               GradRequest req = {}) {
  const std::size_t n = x.extent(0), cin = x.extent(1), h = x.extent(2), w = x.extent(3), hw = h * w;
  const std::size_t cout = kernel.extent(0), chunk = detail::upconv_chunk(cin, hw);
  require_shape(dy, Shape{n, cout, 2 * h, 2 * w}, "upconv2x backward dy");
  ConvGrads<T> g;
  std::array<BasicTensor<T>, 4> pk, dpk;
  if (req.input) {
    g.input = BasicTensor<T>(x.shape());
    for (std::size_t p = 0; p < 4; ++p) pk[p] = detail::phase_kernel(kernel, p / 2, p % 2);
  }
  if (req.params) {
    g.kernel = BasicTensor<T>(kernel.shape());
    g.bias = BasicTensor<T>(Shape{cout});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t oc = 0; oc < cout; ++oc) {
        const T* src = dy.data() + (i * cout + oc) * 4 * hw;
        T acc{0};
        for (std::size_t q = 0; q < 4 * hw; ++q) acc += src[q];
        g.bias[oc] += acc;
      }
    for (auto& d : dpk) d = BasicTensor<T>(Shape{cout, cin * 4});
  }
  std::vector<T> col(cin * 4 * chunk * hw), dout(cout * chunk * hw);
  for (std::size_t i0 = 0; i0 < n; i0 += chunk) {
    const std::size_t m = std::min(chunk, n - i0), cols = m * hw;
    for (std::size_t p = 0; p < 4; ++p) {
      const std::size_t a = p / 2, b = p % 2;
      for (std::size_t oc = 0; oc < cout; ++oc)
        for (std::size_t i = 0; i < m; ++i) {
          const T* src = dy.data() + ((i0 + i) * cout + oc) * 4 * hw + a * 2 * w + b;
          T* dst = dout.data() + oc * cols + i * hw;
          for (std::size_t yy = 0; yy < h; ++yy)
            for (std::size_t xx = 0; xx < w; ++xx) dst[yy * w + xx] = src[yy * 4 * w + 2 * xx];
        }
      if (req.params) {
        detail::phase_im2col(x.data() + i0 * cin * hw, m, cin, h, w, a, b, col.data());
        detail::gemm(detail::Trans::no, detail::Trans::yes, cout, cin * 4, cols, T{1}, dout.data(), col.data(),
                     T{1}, dpk[p].data());
      }
      if (req.input) {
        detail::gemm(detail::Trans::yes, detail::Trans::no, cin * 4, cols, cout, T{1}, pk[p].data(), dout.data(),
                     T{0}, col.data());
        detail::phase_col2im(col.data(), m, cin, h, w, a, b, g.input.data() + i0 * cin * hw);
      }
    }
  }
  if (req.params)
    for (std::size_t p = 0; p < 4; ++p) detail::unfold_phase_kernel(dpk[p].data(), cout, cin, p / 2, p % 2, g.kernel.data());
  return g;
}

// ---------------------------------------------------------------------------
// softmax family over the last axis of (N, K)

template <typename T>
BasicTensor<T> log_softmax(const BasicTensor<T>& logits) {
  if (logits.rank() != 2) throw ShapeError("log_softmax: need (N, K), got " + shape_string(logits.shape()));
  const std::size_t n = logits.extent(0), k = logits.extent(1);
  BasicTensor<T> out(logits.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = logits.data() + i * k;
    const T peak = *std::max_element(row, row + k);
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) sum += std::exp(static_cast<double>(row[j] - peak));
    const double lse = std::log(sum);
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] = static_cast<T>(static_cast<double>(row[j] - peak) - lse);
  }
  return out;
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& logits) {
  BasicTensor<T> out = log_softmax(logits);
  for (T& v : out.values()) v = std::exp(v);
  return out;
}

/// Backward of softmax given upstream dy: dx = p * (dy - <dy, p>).
template <typename T>
BasicTensor<T> softmax_backward(const BasicTensor<T>& probs, const BasicTensor<T>& dy) {
  require_same_shape(probs, dy, "softmax backward");
  const std::size_t n = probs.extent(0), k = probs.extent(1);
  BasicTensor<T> dx(probs.shape());
  for (std::size_t i = 0; i < n; ++i) {
    double dot = 0.0;
    for (std::size_t j = 0; j < k; ++j) dot += static_cast<double>(dy[i * k + j]) * probs[i * k + j];
    for (std::size_t j = 0; j < k; ++j) dx[i * k + j] = static_cast<T>(probs[i * k + j] * (dy[i * k + j] - dot));
  }
  return dx;
}

/// Backward of log_softmax: dx = dy - softmax * sum(dy).
template <typename T>
BasicTensor<T> log_softmax_backward(const BasicTensor<T>& logp, const BasicTensor<T>& dy) {
  require_same_shape(logp, dy, "log_softmax backward");
  const std::size_t n = logp.extent(0), k = logp.extent(1);
  BasicTensor<T> dx(logp.shape());
  for (std::size_t i = 0; i < n; ++i) {
    double total = 0.0;
    for (std::size_t j = 0; j < k; ++j) total += dy[i * k + j];
    for (std::size_t j = 0; j < k; ++j)
      dx[i * k + j] = static_cast<T>(dy[i * k + j] - std::exp(static_cast<double>(logp[i * k + j])) * total);
  }
  return dx;
}

/// Per-row cross-entropy -sum_j t_j log softmax(x)_j, natural log.
template <typename T>
std::vector<T> cross_entropy(const BasicTensor<T>& logits, const BasicTensor<T>& targets) {
  require_same_shape(logits, targets, "cross_entropy");
  const BasicTensor<T> logp = log_softmax(logits);
  const std::size_t n = logits.extent(0), k = logits.extent(1);
  std::vector<T> loss(n);
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < k; ++j) acc -= static_cast<double>(targets[i * k + j]) * logp[i * k + j];
    loss[i] = static_cast<T>(acc);
  }
  return loss;
}

/// Gradient of sum_i w_i * CE_i with respect to the logits.
template <typename T>
BasicTensor<T> cross_entropy_backward(const BasicTensor<T>& logits, const BasicTensor<T>& targets,
                                      std::span<const std::type_identity_t<T>> row_weights) {
  require_same_shape(logits, targets, "cross_entropy backward");
  const std::size_t n = logits.extent(0), k = logits.extent(1);
  if (row_weights.size() != n) throw ShapeError("cross_entropy backward: one weight per row required");
  const BasicTensor<T> p = softmax(logits);
  BasicTensor<T> dx(logits.shape());
  for (std::size_t i = 0; i < n; ++i) {
    double mass = 0.0;
    for (std::size_t j = 0; j < k; ++j) mass += targets[i * k + j];
    for (std::size_t j = 0; j < k; ++j)
      dx[i * k + j] = static_cast<T>(row_weights[i] * (p[i * k + j] * mass - targets[i * k + j]));
  }
  return dx;
}

template <typename T>
BasicTensor<T> one_hot(std::span<const int> labels, std::size_t classes) {
  BasicTensor<T> out(Shape{labels.size(), classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) throw ShapeError("one_hot: label out of range");
    out[i * classes + static_cast<std::size_t>(labels[i])] = T{1};
  }
  return out;
}

// ---------------------------------------------------------------------------
// mean of squares

template <typename T>
T mean_of_squares(const BasicTensor<T>& x) {
  if (x.empty()) throw ShapeError("mean_of_squares: empty tensor");
  double acc = 0.0;
  for (const T v : x.values()) acc += static_cast<double>(v) * v;
  return static_cast<T>(acc / static_cast<double>(x.size()));
}

template <typename T>
BasicTensor<T> mean_of_squares_backward(const BasicTensor<T>& x, T upstream = T{1}) {
  BasicTensor<T> dx(x.shape());
  const T factor = upstream * T{2} / static_cast<T>(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = factor * x[i];
  return dx;
}

/// mean(x_i^2) for each leading-axis row, accumulated in double.
template <typename T>
std::vector<double> row_mean_of_squares(const BasicTensor<T>& x) {
  const std::size_t n = x.extent(0), rs = x.row_size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    const T* p = x.data() + i * rs;
    for (std::size_t j = 0; j < rs; ++j) acc += static_cast<double>(p[j]) * p[j];
    out[i] = acc / static_cast<double>(rs);
  }
  return out;
}

}  // namespace pcnprobe
