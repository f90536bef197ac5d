#pragma once

// Deterministic parameter initialization and the named-parameter walk.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "accvit/tensor.hpp"

namespace accvit {

template <typename T>
using ParamList = std::vector<std::pair<std::string, Tensor<T>*>>;

template <typename T>
std::size_t count_parameters(const ParamList<T>& params) {
  std::size_t n = 0;
  for (const auto& [name, t] : params) n += t->numel();
  return n;
}

/// Draws every parameter from one mt19937_64 stream, in construction order.
class ParamInit {
 public:
  explicit ParamInit(std::uint64_t seed) : engine_(seed) {}

  /// Normal(0, std) truncated to [-2 std, 2 std] by rejection.
  template <typename T>
  Tensor<T> trunc_normal(const Shape& shape, double stddev = 0.02) {
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<T> v(numel(shape));
    for (auto& x : v) {
      double z = normal(engine_);
      while (std::abs(z) > 2.0) z = normal(engine_);
      x = static_cast<T>(z * stddev);
    }
    return Tensor<T>::from(shape, std::move(v), true);
  }

  /// Conv kernels [c_out, c_in/groups, kh, kw]: truncated normal with
  /// std 1/sqrt(fan_in), which keeps the residual stream at unit scale.
  template <typename T>
  Tensor<T> conv_weight(const Shape& shape) {
    const std::size_t fan_in = numel(shape) / shape[0];
    return trunc_normal<T>(shape, 1.0 / std::sqrt(static_cast<double>(fan_in)));
  }

  template <typename T>
  Tensor<T> zeros(const Shape& shape) {
    return Tensor<T>::zeros(shape, true);
  }

  template <typename T>
  Tensor<T> ones(const Shape& shape) {
    return Tensor<T>::full(shape, T(1), true);
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace accvit
