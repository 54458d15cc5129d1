#pragma once

// Small building blocks shared by the feature extractors and heads.

#include <cstddef>
#include <random>
#include <string>

#include "epc/ops.hpp"

namespace epc {

using Rng = std::mt19937_64;

/// Uniform in ±sqrt(6 / (fan_in + fan_out)).
template <typename T>
Tensor<T> xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng);

/// Shared per-point affine map x·W + b.
template <typename T>
struct Affine {
  Parameter<T> weight;  // [in, out]
  Parameter<T> bias;    // [out]

  Affine() = default;
  Affine(std::size_t in, std::size_t out, const std::string& name, Rng& rng);

  std::size_t in() const { return weight.value().dim(0); }
  std::size_t out() const { return weight.value().dim(1); }
  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight.value(), bias.value()); }
};

inline constexpr double kLeakySlope = 0.2;

/// affine -> batch norm -> LeakyReLU(0.2).
template <typename T>
struct DenseBlock {
  Affine<T> affine;
  BatchNormParams<T> bn;

  DenseBlock() = default;
  DenseBlock(std::size_t in, std::size_t out, const std::string& name, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x, BatchNormMode mode) {
    return leaky_relu(batch_norm(affine(x), bn, mode), T(kLeakySlope));
  }
};

}  // namespace epc
