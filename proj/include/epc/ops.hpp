#pragma once

// Differentiable tensor operations. Every function here records its gradient
// rule on the active tape (see tensor.hpp) when an input requires a gradient.
//
// Conventions: the last axis is the channel axis; "leading axes" are treated
// as a flat batch of rows. There is no general broadcasting.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "epc/tensor.hpp"

namespace epc {

// --- linear primitives ------------------------------------------------------

/// a: [..., m, k]. b: [k, n] (shared across a's leading axes) or [..., k, n]
/// with the same leading axes as a. Result: [..., m, n].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T offset);

/// x: [..., c] plus bias: [c] on every row.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias);

/// Shared fully connected layer applied per row: x [..., in] · w [in, out] + b [out].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

/// Concatenation along the last axis; all leading axes must agree.
template <typename T>
Tensor<T> concat(std::span<const Tensor<T>> parts);

/// Channels [begin, end) of the last axis.
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, std::size_t begin, std::size_t end);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

/// Swaps the last two axes.
template <typename T>
Tensor<T> transpose(const Tensor<T>& x);

/// Selects slices along axis 0; indices may repeat.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> indices);

/// rows: [r, c]; factors: [..., r]. out[..., i, :] = factors[..., i] * rows[i, :].
template <typename T>
Tensor<T> row_scale(const Tensor<T>& rows, const Tensor<T>& factors);

// --- activations and normalizations ----------------------------------------

template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);

/// Unit L2 norm along the last axis. All-zero vectors map to zero.
template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x);

enum class BatchNormMode { train, inference };

/// Per-channel batch normalization state. Statistics are taken over every
/// leading element (points and batch entries) of the input.
template <typename T>
struct BatchNormParams {
  Parameter<T> gamma;
  Parameter<T> beta;
  std::vector<T> running_mean;
  std::vector<T> running_var;
  bool initialized = false;
  T momentum = T(0.9);
  T epsilon = T(1e-5);

  BatchNormParams() = default;
  BatchNormParams(std::size_t channels, const std::string& name);

  std::size_t channels() const { return running_mean.size(); }
  /// Running mean 0, running variance 1; marks the statistics usable.
  void reset_statistics();
  BatchNormParams clone() const;
};

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, BatchNormParams<T>& bn, BatchNormMode mode);

// --- reductions -------------------------------------------------------------

enum class Reduce { max, mean, sum };

/// Removes `axis`. Max routes the gradient to the first (lowest-index) maximum.
template <typename T>
Tensor<T> reduce(const Tensor<T>& x, std::size_t axis, Reduce kind);

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x);

}  // namespace epc
