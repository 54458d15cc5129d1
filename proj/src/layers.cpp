#include "epc/layers.hpp"

#include <cmath>

namespace epc {

template <typename T>
Tensor<T> xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Tensor<T> w({fan_in, fan_out});
  for (auto& v : w.values()) v = static_cast<T>(dist(rng));
  return w;
}

template <typename T>
Affine<T>::Affine(std::size_t in, std::size_t out, const std::string& name, Rng& rng)
    : weight(name + ".weight", xavier_uniform<T>(in, out, rng)), bias(name + ".bias", Tensor<T>({out})) {}

template <typename T>
DenseBlock<T>::DenseBlock(std::size_t in, std::size_t out, const std::string& name, Rng& rng)
    : affine(in, out, name, rng), bn(out, name + ".bn") {
  bn.reset_statistics();
}

template Tensor<float> xavier_uniform(std::size_t, std::size_t, Rng&);
template Tensor<double> xavier_uniform(std::size_t, std::size_t, Rng&);
template struct Affine<float>;
template struct Affine<double>;
template struct DenseBlock<float>;
template struct DenseBlock<double>;

}  // namespace epc
