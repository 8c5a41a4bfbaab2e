#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <type_traits>
#include <vector>

#include "pcnprobe/numerics/rng.hpp"
#include "pcnprobe/numerics/tensor.hpp"

namespace pcnprobe {

/// A scalar-valued function of one tensor together with its analytic gradient.
template <typename T>
struct ScalarObjective {
  std::function<double(const BasicTensor<T>&)> value;
  std::function<BasicTensor<T>(const BasicTensor<T>&)> gradient;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t coordinates_checked = 0;
  bool structural_zero = false;  // gradient below finite-difference resolution everywhere
  std::optional<std::size_t> non_finite_index;  // set when the analytic gradient is not finite

  bool passed(double tolerance) const { return !non_finite_index && max_relative_error < tolerance; }
};

template <typename T>
constexpr double default_fd_step() {
  if constexpr (std::is_same_v<T, float>) {
    return 1e-3;
  } else {
    return 1e-5;
  }
}

/// Turns a tensor-valued op into a scalar objective through a fixed random
/// projection: L(x) = <r, f(x)>, dL/dx = backward(x, r).
template <typename T, typename Forward, typename Backward>
ScalarObjective<T> project(Forward forward, Backward backward, const Shape& output_shape, RngStream rng) {
  BasicTensor<T> direction(output_shape);
  for (T& v : direction.values()) v = static_cast<T>(rng.normal());
  return ScalarObjective<T>{
      [forward, direction](const BasicTensor<T>& x) {
        const BasicTensor<T> y = forward(x);
        double acc = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) acc += static_cast<double>(direction[i]) * y[i];
        return acc;
      },
      [backward, direction](const BasicTensor<T>& x) { return backward(x, direction); }};
}

/// Central differences of `value` at the given coordinates of `point`, plus
/// the finite-difference resolution used to recognise structural zeros:
/// 256 * eps_O * max(1, |L|) / step.
struct FiniteDifferences {
  std::vector<std::size_t> coords;
  std::vector<double> numeric;
  double resolution = 0.0;
};

template <typename O>
FiniteDifferences finite_differences(const std::function<double(const BasicTensor<O>&)>& value,
                                     const BasicTensor<O>& point, RngStream& rng, std::size_t samples = 24,
                                     double step = default_fd_step<O>()) {
  FiniteDifferences fd;
  if (point.size() <= samples) {
    for (std::size_t i = 0; i < point.size(); ++i) fd.coords.push_back(i);
  } else {
    for (std::size_t s = 0; s < samples; ++s) fd.coords.push_back(static_cast<std::size_t>(rng.below(point.size())));
  }
  fd.resolution = 256.0 * std::numeric_limits<O>::epsilon() * std::max(1.0, std::abs(value(point))) / step;
  BasicTensor<O> probe = point;
  for (const std::size_t i : fd.coords) {
    const O original = probe[i];
    probe[i] = static_cast<O>(original + step);
    const double up = value(probe);
    probe[i] = static_cast<O>(original - step);
    const double down = value(probe);
    probe[i] = original;
    // Divide by the step actually realised in O precision.
    const double realised = static_cast<double>(static_cast<O>(original + step)) -
                            static_cast<double>(static_cast<O>(original - step));
    fd.numeric.push_back((up - down) / realised);
  }
  return fd;
}

/// Normwise comparison: |a_i - n_i| / max(|n_i|, max_j |a_j|). When every
/// analytic and numeric value lies below the resolution the gradient is a
/// structural zero (a bias feeding a train-mode batchnorm, say) and passes if
/// the absolute error is below the resolution too. `analytic_floor` raises the
/// resolution to the noise level of a lower-precision analytic gradient.
template <typename A>
GradCheckResult compare_gradient(const BasicTensor<A>& analytic, const FiniteDifferences& fd,
                                 double analytic_floor = 0.0) {
  GradCheckResult result;
  const double resolution = std::max(fd.resolution, analytic_floor);
  double scale = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    if (!std::isfinite(analytic[i])) {
      result.non_finite_index = i;
      result.max_relative_error = std::numeric_limits<double>::infinity();
      return result;
    }
    scale = std::max(scale, std::abs(static_cast<double>(analytic[i])));
  }
  double numeric_scale = 0.0;
  for (const double v : fd.numeric) numeric_scale = std::max(numeric_scale, std::abs(v));
  result.structural_zero = scale < resolution && numeric_scale < resolution;
  for (std::size_t c = 0; c < fd.coords.size(); ++c) {
    const std::size_t i = fd.coords[c];
    const double abs_err = std::abs(static_cast<double>(analytic[i]) - fd.numeric[c]);
    const double err = result.structural_zero ? (abs_err < resolution ? 0.0 : abs_err / resolution)
                                              : abs_err / std::max(std::abs(fd.numeric[c]), scale);
    result.max_abs_error = std::max(result.max_abs_error, abs_err);
    if (err > result.max_relative_error || result.coordinates_checked == 0) {
      result.max_relative_error = err;
      result.worst_index = i;
    }
    ++result.coordinates_checked;
  }
  return result;
}

template <typename T>
GradCheckResult grad_check(const ScalarObjective<T>& objective, const BasicTensor<T>& point, RngStream& rng,
                           std::size_t samples = 24, double step = default_fd_step<T>()) {
  const BasicTensor<T> analytic = objective.gradient(point);
  require_same_shape(analytic, point, "grad_check analytic gradient");
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    if (!std::isfinite(analytic[i])) return compare_gradient(analytic, FiniteDifferences{});
  }
  return compare_gradient(analytic, finite_differences<T>(objective.value, point, rng, samples, step));
}

/// Uniform point in [lo, hi] of the given shape.
template <typename T>
BasicTensor<T> random_point(const Shape& shape, RngStream& rng, double lo = -2.0, double hi = 2.0) {
  BasicTensor<T> x(shape);
  for (T& v : x.values()) v = static_cast<T>(rng.uniform(lo, hi));
  return x;
}

}  // namespace pcnprobe
