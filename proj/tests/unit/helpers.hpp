#pragma once

// Shared fixtures for the unit tests.

#include <cmath>
#include <filesystem>
#include <string>

#include "pcnprobe/numerics/rng.hpp"
#include "pcnprobe/numerics/tensor.hpp"

namespace pcnprobe::testing {

template <typename T>
BasicTensor<T> randn(const Shape& shape, RngStream& rng, double scale = 1.0) {
  BasicTensor<T> t(shape);
  for (T& v : t.values()) v = static_cast<T>(scale * rng.normal());
  return t;
}

template <typename T>
double max_abs_diff(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

/// Direct-summation 3x3 convolution, padding 1.
template <typename T>
BasicTensor<T> naive_conv3x3(const BasicTensor<T>& x, const BasicTensor<T>& k, const BasicTensor<T>& b) {
  const std::size_t n = x.extent(0), cin = x.extent(1), h = x.extent(2), w = x.extent(3), cout = k.extent(0);
  BasicTensor<T> y(Shape{n, cout, h, w});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c) {
          double acc = b[o];
          for (std::size_t ch = 0; ch < cin; ++ch)
            for (std::size_t ky = 0; ky < 3; ++ky)
              for (std::size_t kx = 0; kx < 3; ++kx) {
                const long sy = static_cast<long>(r + ky) - 1, sx = static_cast<long>(c + kx) - 1;
                if (sy < 0 || sx < 0 || sy >= static_cast<long>(h) || sx >= static_cast<long>(w)) continue;
                acc += static_cast<double>(k[((o * cin + ch) * 3 + ky) * 3 + kx]) *
                       x[((i * cin + ch) * h + sy) * w + sx];
              }
          y[((i * cout + o) * h + r) * w + c] = static_cast<T>(acc);
        }
  return y;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("pcnprobe_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace pcnprobe::testing
