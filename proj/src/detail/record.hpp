#pragma once

// Internal helper for attaching backward rules to the active tape.

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "epc/tensor.hpp"

namespace epc::detail {

template <typename T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

/// Attaches `fn` as the backward rule of `out` when recording is active and
/// some input requires a gradient. `fn` may assume the gradient buffers of
/// inputs that require gradients are allocated.
template <typename T, typename Fn>
void record(const char* op, std::vector<NodePtr<T>> inputs, Tensor<T>& out, Fn&& fn) {
  Tape<T>* tape = active_tape<T>();
  if (tape == nullptr) return;
  bool any = false;
  for (const auto& in : inputs) any = any || in->requires_grad;
  if (!any) return;
  out.set_requires_grad(true);
  tape->push(TapeRecord<T>{op, std::move(inputs), out.node(), std::function<void()>(std::forward<Fn>(fn))});
}

}  // namespace epc::detail
