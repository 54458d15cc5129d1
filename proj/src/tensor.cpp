#include "epc/tensor.hpp"

#include <atomic>
#include <sstream>

namespace epc {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : node_(std::make_shared<TensorNode<T>>()) {
  node_->data.assign(shape_size(shape), fill);
  node_->shape = std::move(shape);
}

template <typename T>
Tensor<T> Tensor<T>::from_storage(Shape shape, Storage<T> values) {
  if (shape_size(shape) != values.size()) {
    throw ShapeError("tensor: shape " + shape_string(shape) + " holds " + std::to_string(shape_size(shape)) +
                     " elements, got " + std::to_string(values.size()));
  }
  Tensor t;
  t.node_ = std::make_shared<TensorNode<T>>();
  t.node_->shape = std::move(shape);
  t.node_->data = std::move(values);
  return t;
}

template <typename T>
Tensor<T>::Tensor(Shape shape, const std::vector<T>& values)
    : Tensor(from_storage(std::move(shape), Storage<T>(values.begin(), values.end()))) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::initializer_list<T> values)
    : Tensor(from_storage(std::move(shape), Storage<T>(values))) {}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return from_storage(Shape{}, Storage<T>{value});
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw ShapeError("tensor: axis " + std::to_string(axis) + " out of range for shape " +
                     shape_string(shape()));
  }
  return node_->shape[axis];
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) {
    throw ShapeError("tensor: item() on shape " + shape_string(shape()));
  }
  return node_->data[0];
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return from_storage(node_->shape, node_->data);
}

namespace {

std::atomic<std::uint64_t> g_backward_generation{0};

template <typename T>
Tape<T>*& tape_slot() {
  thread_local Tape<T>* slot = nullptr;
  return slot;
}

struct SignatureState {
  bool enabled = false;
  std::uint64_t hash = 1469598103934665603ull;
};

SignatureState& signature_state() {
  thread_local SignatureState state;
  return state;
}

}  // namespace

std::uint64_t backward_generation() { return g_backward_generation.load(); }

template <typename T>
Tape<T>* active_tape() {
  return tape_slot<T>();
}

namespace detail {
template <typename T>
void set_active_tape(Tape<T>* tape) {
  tape_slot<T>() = tape;
}
}  // namespace detail

template <typename T>
std::size_t Tape<T>::backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " +
                     (loss.defined() ? shape_string(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) {
    throw std::logic_error("backward: loss is not connected to any parameter on this tape");
  }
  ++g_backward_generation;
  auto& seed = loss.node()->grad;
  seed.assign(1, T(0));
  seed[0] = T(1);
  std::size_t ran = 0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (it->output->grad.empty()) continue;  // not on a path to the loss
    for (auto& input : it->inputs) {
      if (input->requires_grad) input->ensure_grad();
    }
    it->backward();
    ++ran;
  }
  return ran;
}

template <typename T>
TapeScope<T>::TapeScope() : previous_(active_tape<T>()) {
  detail::set_active_tape<T>(&tape_);
}

template <typename T>
TapeScope<T>::~TapeScope() {
  detail::set_active_tape<T>(previous_);
}

template <typename T>
NoGradScope<T>::NoGradScope() : previous_(active_tape<T>()) {
  detail::set_active_tape<T>(nullptr);
}

template <typename T>
NoGradScope<T>::~NoGradScope() {
  detail::set_active_tape<T>(previous_);
}

template <typename T>
Parameter<T>::Parameter(std::string name, Tensor<T> value)
    : name_(std::move(name)), value_(std::move(value)) {
  value_.set_requires_grad(true);
  value_.zero_grad();
}

template <typename T>
Parameter<T> Parameter<T>::clone() const {
  return Parameter(name_, value_.detach());
}

bool BranchSignature::enabled() { return signature_state().enabled; }
void BranchSignature::enable(bool on) { signature_state().enabled = on; }
void BranchSignature::reset() { signature_state().hash = 1469598103934665603ull; }
std::uint64_t BranchSignature::value() { return signature_state().hash; }
void BranchSignature::mix(std::uint64_t word) {
  auto& h = signature_state().hash;
  h ^= word + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
}

#define EPC_INSTANTIATE(T)                      \
  template class Tensor<T>;                     \
  template class Tape<T>;                       \
  template class TapeScope<T>;                  \
  template class NoGradScope<T>;                \
  template class Parameter<T>;                  \
  template Tape<T>* active_tape<T>();           \
  template void detail::set_active_tape<T>(Tape<T>*);

EPC_INSTANTIATE(float)
EPC_INSTANTIATE(double)

}  // namespace epc
