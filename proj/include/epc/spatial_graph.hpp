#pragma once

// Spatial k-NN graphs, proxy points and the proxy convolution, plus the
// EdgeConv reference layer and the activation-memory model comparing them.

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "epc/layers.hpp"

namespace epc {

/// n x 3 coordinates in meters, row-major.
struct PointCloud {
  std::vector<float> coords;

  PointCloud() = default;
  explicit PointCloud(std::vector<float> xyz);

  std::size_t size() const { return coords.size() / 3; }
  float x(std::size_t i) const { return coords[3 * i]; }
  float y(std::size_t i) const { return coords[3 * i + 1]; }
  float z(std::size_t i) const { return coords[3 * i + 2]; }

  /// Throws std::invalid_argument unless n >= 2 and every coordinate is finite.
  void validate() const;
};

/// Clouds as a [B, n, 3] tensor. All clouds must have the same size.
template <typename T>
Tensor<T> clouds_to_tensor(std::span<const PointCloud> clouds);

/// Counts activation elements of the feature maps a layer keeps for its
/// backward pass. Fused affine/normalization/activation chains count once.
struct ElementTally {
  std::size_t elements = 0;
  void add(std::size_t count) { elements += count; }
};

/// Row-major n x n squared Euclidean distances.
std::vector<double> pairwise_sq_dist(const PointCloud& cloud);

struct KnnOptions {
  std::size_t k = 20;
  /// Let a point count as its own neighbor (the literal k-smallest rule).
  bool include_self = false;
};

/// Dense binary k-NN graph; row i marks the neighbors of point i. Immutable;
/// copies share storage.
class AdjacencyMatrix {
 public:
  AdjacencyMatrix() = default;
  AdjacencyMatrix(std::size_t n, std::size_t k, std::vector<std::uint8_t> entries);

  std::size_t size() const { return n_; }
  std::size_t k() const { return k_; }
  std::uint8_t operator()(std::size_t i, std::size_t j) const { return (*entries_)[i * n_ + j]; }
  std::span<const std::uint8_t> row(std::size_t i) const { return {entries_->data() + i * n_, n_}; }
  std::span<const std::uint8_t> entries() const { return *entries_; }
  /// Column indices of row i in increasing order.
  std::vector<std::size_t> neighbors(std::size_t i) const;
  /// Same as neighbors(i), precomputed.
  std::span<const std::uint32_t> columns(std::size_t i) const {
    return {sparse_->columns.data() + sparse_->offsets[i], sparse_->offsets[i + 1] - sparse_->offsets[i]};
  }

 private:
  struct Sparse {
    std::vector<std::size_t> offsets;
    std::vector<std::uint32_t> columns;
  };
  std::size_t n_ = 0;
  std::size_t k_ = 0;
  std::shared_ptr<const std::vector<std::uint8_t>> entries_;
  std::shared_ptr<const Sparse> sparse_;
};

/// k nearest neighbors in coordinate space; ties go to the lower index.
/// Adds the n*n adjacency entries to `tally` when given.
AdjacencyMatrix build_adjacency(const PointCloud& cloud, const KnnOptions& options, ElementTally* tally = nullptr);
AdjacencyMatrix build_adjacency(const PointCloud& cloud, std::size_t k);

/// Q = (1/k) G Y. features: [n, d] for one graph, or [B, n, d] with one graph
/// per batch entry.
template <typename T>
Tensor<T> proxy_points(const AdjacencyMatrix& adj, const Tensor<T>& features);
template <typename T>
Tensor<T> proxy_points(std::span<const AdjacencyMatrix> adj, const Tensor<T>& features);

/// g_Θ as a chain of dense blocks (d_in -> d_out, then d_out -> d_out).
template <typename T>
struct ProxyConvParams {
  std::vector<DenseBlock<T>> stages;

  ProxyConvParams() = default;
  ProxyConvParams(std::size_t d_in, std::size_t d_out, std::size_t depth, const std::string& name, Rng& rng);

  std::size_t d_in() const { return stages.front().affine.in(); }
  std::size_t d_out() const { return stages.back().affine.out(); }
};

/// g_Θ(Q - Y), plus Y when d_in == d_out.
template <typename T>
Tensor<T> proxy_conv(const Tensor<T>& features, std::span<const AdjacencyMatrix> adj, ProxyConvParams<T>& params,
                     BatchNormMode mode, ElementTally* tally = nullptr);
template <typename T>
Tensor<T> proxy_conv(const Tensor<T>& features, const AdjacencyMatrix& adj, ProxyConvParams<T>& params,
                     BatchNormMode mode, ElementTally* tally = nullptr);

/// h_Θ over [x_i, x_j - x_i]: weight rows [0, d_in) act on x_i, the rest on
/// the neighbor difference.
template <typename T>
struct EdgeConvParams {
  Affine<T> h;

  EdgeConvParams() = default;
  EdgeConvParams(std::size_t d_in, std::size_t d_out, const std::string& name, Rng& rng);
};

/// Neighbor lists of the k nearest rows in feature space (self excluded,
/// ties to the lower index).
template <typename T>
std::vector<std::size_t> feature_knn(const Tensor<T>& features, std::size_t k);

/// max_j ReLU(h_Θ(x_i, x_j - x_i)) over the k feature-space neighbors of i.
/// features: [n, d_in].
template <typename T>
Tensor<T> edge_conv(const Tensor<T>& features, std::size_t k, EdgeConvParams<T>& params,
                    ElementTally* tally = nullptr);

struct MemoryModelReport {
  std::size_t proxy_elements = 0;
  std::size_t edge_elements = 0;
  double ratio = 0.0;
};

/// proxy = m*n*5d + n*n, edge = m*n*(2+4k)*d.
MemoryModelReport memory_model(std::size_t n, std::size_t k, std::size_t d, std::size_t m);

}  // namespace epc
