#pragma once

// Dense tensors and the reverse-mode tape they record onto.
//
// A Tensor is a cheap handle to shared storage (like a framework tensor):
// copying a Tensor aliases the same node. Use detach() for an independent copy.
// Operations in ops.hpp record a backward closure on the thread's active Tape
// whenever one exists and any input requires a gradient.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <new>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace epc {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dimension mismatch between operands. The message names both shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Cache-line aligned allocation, so vectorized kernels take the same code
/// path (and produce the same bits) regardless of where malloc puts a buffer.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t alignment = 64;

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(alignment)));
  }
  void deallocate(T* p, std::size_t) { ::operator delete(p, std::align_val_t(alignment)); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const {
    return true;
  }
};

template <typename T>
using Storage = std::vector<T, AlignedAllocator<T>>;

template <typename T>
struct TensorNode {
  Shape shape;
  Storage<T> data;
  Storage<T> grad;  // empty until something writes a gradient
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<TensorNode<T>>;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, const std::vector<T>& values);
  Tensor(Shape shape, std::initializer_list<T> values);
  static Tensor from_storage(Shape shape, Storage<T> values);
  static Tensor scalar(T value);
  static Tensor from_node(NodePtr node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return node_->data.size(); }

  std::span<T> values() { return node_->data; }
  std::span<const T> values() const { return node_->data; }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.assign(node_->data.size(), T(0)); }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }

  /// Value of a single-element tensor.
  T item() const;

  /// Deep copy with no gradient history.
  Tensor detach() const;

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

/// One recorded operation. `backward` reads output->grad and accumulates
/// into the gradients of `inputs`.
template <typename T>
struct TapeRecord {
  const char* op = "";
  std::vector<std::shared_ptr<TensorNode<T>>> inputs;
  std::shared_ptr<TensorNode<T>> output;
  std::function<void()> backward;
};

template <typename T>
class Tape {
 public:
  void push(TapeRecord<T> record) { records_.push_back(std::move(record)); }
  std::size_t size() const { return records_.size(); }
  std::span<const TapeRecord<T>> records() const { return records_; }
  void clear() { records_.clear(); }

  /// Seeds d(loss)/d(loss) = 1 and sweeps the records in reverse insertion
  /// order, running each reachable backward exactly once. Returns the number
  /// of records whose backward ran.
  std::size_t backward(const Tensor<T>& loss);

 private:
  std::vector<TapeRecord<T>> records_;
};

/// Installs a fresh tape as the thread's active tape for scalar type T.
template <typename T>
class TapeScope {
 public:
  TapeScope();
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

  Tape<T>& tape() { return tape_; }

 private:
  Tape<T> tape_;
  Tape<T>* previous_;
};

/// Suspends recording for scalar type T (frozen-network inference).
template <typename T>
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* previous_;
};

template <typename T>
Tape<T>* active_tape();

namespace detail {
template <typename T>
void set_active_tape(Tape<T>* tape);
}

/// Monotone counter bumped by every Tape::backward on any thread.
std::uint64_t backward_generation();

/// Learnable tensor with a stable name. The gradient lives on the value's
/// node and always has the value's shape.
template <typename T>
class Parameter {
 public:
  Parameter() = default;
  Parameter(std::string name, Tensor<T> value);

  const std::string& name() const { return name_; }
  Tensor<T>& value() { return value_; }
  const Tensor<T>& value() const { return value_; }
  std::span<const T> gradient() const { return value_.grad(); }
  std::size_t size() const { return value_.size(); }
  void zero_grad() { value_.zero_grad(); }

  /// Independent storage with the same name and values.
  Parameter clone() const;

 private:
  std::string name_;
  Tensor<T> value_;
};

/// Branch signature of nonsmooth operations (ReLU masks, argmax picks, kNN
/// sets). The finite-difference checker compares signatures to know whether
/// a perturbation crossed a kink.
class BranchSignature {
 public:
  static bool enabled();
  static void enable(bool on);
  static void reset();
  static std::uint64_t value();
  static void mix(std::uint64_t word);
};

}  // namespace epc
