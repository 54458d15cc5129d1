#include "epc/spatial_graph.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "detail/record.hpp"

namespace epc {

PointCloud::PointCloud(std::vector<float> xyz) : coords(std::move(xyz)) {
  if (coords.size() % 3 != 0) {
    throw std::invalid_argument("point cloud: coordinate count " + std::to_string(coords.size()) +
                                " is not a multiple of 3");
  }
}

void PointCloud::validate() const {
  if (coords.size() % 3 != 0) throw std::invalid_argument("point cloud: ragged coordinate array");
  if (size() < 2) throw std::invalid_argument("point cloud: need at least 2 points, got " + std::to_string(size()));
  for (float v : coords) {
    if (!std::isfinite(v)) throw std::invalid_argument("point cloud: non-finite coordinate");
  }
}

template <typename T>
Tensor<T> clouds_to_tensor(std::span<const PointCloud> clouds) {
  if (clouds.empty()) throw std::invalid_argument("clouds_to_tensor: empty batch");
  const std::size_t n = clouds.front().size();
  std::vector<T> values;
  values.reserve(clouds.size() * n * 3);
  for (const auto& c : clouds) {
    if (c.size() != n) {
      throw ShapeError("clouds_to_tensor: batch mixes " + std::to_string(n) + " and " + std::to_string(c.size()) +
                       " point clouds");
    }
    values.insert(values.end(), c.coords.begin(), c.coords.end());
  }
  return Tensor<T>({clouds.size(), n, 3}, std::move(values));
}

std::vector<double> pairwise_sq_dist(const PointCloud& cloud) {
  cloud.validate();
  const std::size_t n = cloud.size();
  std::vector<double> d(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double dx = double(cloud.x(i)) - cloud.x(j);
      const double dy = double(cloud.y(i)) - cloud.y(j);
      const double dz = double(cloud.z(i)) - cloud.z(j);
      d[i * n + j] = d[j * n + i] = dx * dx + dy * dy + dz * dz;
    }
  }
  return d;
}

AdjacencyMatrix::AdjacencyMatrix(std::size_t n, std::size_t k, std::vector<std::uint8_t> entries)
    : n_(n), k_(k), entries_(std::make_shared<const std::vector<std::uint8_t>>(std::move(entries))) {
  if (entries_->size() != n_ * n_) throw std::invalid_argument("adjacency: entry count does not match n*n");
  auto sparse = std::make_shared<Sparse>();
  sparse->offsets.reserve(n_ + 1);
  sparse->offsets.push_back(0);
  for (std::size_t i = 0; i < n_; ++i) {
    const auto r = row(i);
    for (std::size_t j = 0; j < n_; ++j) {
      if (r[j]) sparse->columns.push_back(static_cast<std::uint32_t>(j));
    }
    sparse->offsets.push_back(sparse->columns.size());
  }
  sparse_ = std::move(sparse);
}

std::vector<std::size_t> AdjacencyMatrix::neighbors(std::size_t i) const {
  std::vector<std::size_t> out;
  out.reserve(k_);
  const auto r = row(i);
  for (std::size_t j = 0; j < n_; ++j) {
    if (r[j]) out.push_back(j);
  }
  return out;
}

namespace {

/// Indices of the k smallest (value, index) pairs; `skip` is excluded when set.
std::vector<std::size_t> smallest_k(std::span<const double> dist, std::size_t k, std::size_t skip) {
  std::vector<std::size_t> order;
  order.reserve(dist.size());
  for (std::size_t j = 0; j < dist.size(); ++j) {
    if (j != skip) order.push_back(j);
  }
  auto less = [&](std::size_t a, std::size_t b) { return dist[a] < dist[b] || (dist[a] == dist[b] && a < b); };
  std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k - 1), order.end(), less);
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

void check_k(std::size_t k, std::size_t n, bool include_self) {
  const std::size_t limit = include_self ? n : n - 1;
  if (k < 1 || k > limit) {
    throw std::invalid_argument("k = " + std::to_string(k) + " out of range [1, " + std::to_string(limit) +
                                "] for " + std::to_string(n) + " points");
  }
}

}  // namespace

AdjacencyMatrix build_adjacency(const PointCloud& cloud, const KnnOptions& options, ElementTally* tally) {
  cloud.validate();
  const std::size_t n = cloud.size();
  check_k(options.k, n, options.include_self);
  std::vector<std::uint8_t> entries(n * n, 0);
  std::vector<double> row(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double dx = double(cloud.x(i)) - cloud.x(j);
      const double dy = double(cloud.y(i)) - cloud.y(j);
      const double dz = double(cloud.z(i)) - cloud.z(j);
      row[j] = dx * dx + dy * dy + dz * dz;
    }
    for (std::size_t j : smallest_k(row, options.k, options.include_self ? n : i)) entries[i * n + j] = 1;
  }
  if (tally) tally->add(n * n);
  return AdjacencyMatrix(n, options.k, std::move(entries));
}

AdjacencyMatrix build_adjacency(const PointCloud& cloud, std::size_t k) {
  KnnOptions options;
  options.k = k;
  return build_adjacency(cloud, options);
}

template <typename T>
Tensor<T> proxy_points(std::span<const AdjacencyMatrix> adj, const Tensor<T>& features) {
  const bool batched = features.rank() == 3;
  if (!(features.rank() == 2 || batched) || adj.empty()) {
    throw ShapeError("proxy_points: features must be [n, d] or [B, n, d], got " + shape_string(features.shape()));
  }
  const std::size_t batches = batched ? features.dim(0) : 1;
  const std::size_t n = features.dim(features.rank() - 2);
  const std::size_t d = features.dim(features.rank() - 1);
  if (adj.size() != batches) {
    throw ShapeError("proxy_points: " + std::to_string(adj.size()) + " graphs for features " +
                     shape_string(features.shape()));
  }
  for (const auto& g : adj) {
    if (g.size() != n) {
      throw ShapeError("proxy_points: adjacency " + shape_string({g.size(), g.size()}) + " vs features " +
                       shape_string(features.shape()));
    }
  }
  Tensor<T> out(features.shape());
  auto& q = out.node()->data;
  const auto& y = features.node()->data;
  for (std::size_t b = 0; b < batches; ++b) {
    const T inv_k = T(1) / static_cast<T>(adj[b].k());
    const std::size_t base = b * n * d;
    for (std::size_t i = 0; i < n; ++i) {
      T* qi = q.data() + base + i * d;
      for (std::uint32_t j : adj[b].columns(i)) {
        const T* yj = y.data() + base + j * d;
        for (std::size_t c = 0; c < d; ++c) qi[c] += yj[c];
      }
      for (std::size_t c = 0; c < d; ++c) qi[c] *= inv_k;
    }
  }
  std::vector<AdjacencyMatrix> graphs(adj.begin(), adj.end());
  auto* fp = features.node().get();
  auto* op = out.node().get();
  detail::record<T>("proxy_points", {features.node()}, out, [fp, op, graphs = std::move(graphs), n, d] {
    for (std::size_t b = 0; b < graphs.size(); ++b) {
      const T inv_k = T(1) / static_cast<T>(graphs[b].k());
      const std::size_t base = b * n * d;
      for (std::size_t i = 0; i < n; ++i) {
        const T* gi = op->grad.data() + base + i * d;
        for (std::uint32_t j : graphs[b].columns(i)) {
          T* dj = fp->grad.data() + base + j * d;
          for (std::size_t c = 0; c < d; ++c) dj[c] += inv_k * gi[c];
        }
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> proxy_points(const AdjacencyMatrix& adj, const Tensor<T>& features) {
  return proxy_points(std::span<const AdjacencyMatrix>(&adj, 1), features);
}

template <typename T>
ProxyConvParams<T>::ProxyConvParams(std::size_t d_in, std::size_t d_out, std::size_t depth, const std::string& name,
                                    Rng& rng) {
  if (depth == 0) throw std::invalid_argument("proxy conv: depth must be >= 1");
  for (std::size_t s = 0; s < depth; ++s) {
    stages.emplace_back(s == 0 ? d_in : d_out, d_out, name + ".g" + std::to_string(s), rng);
  }
}

template <typename T>
Tensor<T> proxy_conv(const Tensor<T>& features, std::span<const AdjacencyMatrix> adj, ProxyConvParams<T>& params,
                     BatchNormMode mode, ElementTally* tally) {
  if (features.shape().back() != params.d_in()) {
    throw ShapeError("proxy_conv: features " + shape_string(features.shape()) + " vs weight " +
                     shape_string(params.stages.front().affine.weight.value().shape()));
  }
  const std::size_t rows = features.size() / params.d_in();
  const Tensor<T> q = proxy_points(adj, features);
  Tensor<T> h = sub(q, features);
  if (tally) tally->add(3 * rows * params.d_in());
  for (auto& stage : params.stages) {
    h = stage.forward(h, mode);
    if (tally) tally->add(rows * stage.affine.out());
  }
  if (params.d_in() != params.d_out()) return h;
  if (tally) tally->add(rows * params.d_out());
  return add(h, features);
}

template <typename T>
Tensor<T> proxy_conv(const Tensor<T>& features, const AdjacencyMatrix& adj, ProxyConvParams<T>& params,
                     BatchNormMode mode, ElementTally* tally) {
  return proxy_conv(features, std::span<const AdjacencyMatrix>(&adj, 1), params, mode, tally);
}

template <typename T>
EdgeConvParams<T>::EdgeConvParams(std::size_t d_in, std::size_t d_out, const std::string& name, Rng& rng)
    : h(2 * d_in, d_out, name + ".h", rng) {}

template <typename T>
std::vector<std::size_t> feature_knn(const Tensor<T>& features, std::size_t k) {
  if (features.rank() != 2) throw ShapeError("feature_knn: expected [n, d], got " + shape_string(features.shape()));
  const std::size_t n = features.dim(0);
  const std::size_t d = features.dim(1);
  check_k(k, n, false);
  const auto x = features.values();
  std::vector<std::size_t> out;
  out.reserve(n * k);
  std::vector<double> row(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0;
      for (std::size_t c = 0; c < d; ++c) {
        const double diff = double(x[i * d + c]) - double(x[j * d + c]);
        s += diff * diff;
      }
      row[j] = s;
    }
    const auto nbrs = smallest_k(row, k, i);
    out.insert(out.end(), nbrs.begin(), nbrs.end());
  }
  if (BranchSignature::enabled()) {
    for (std::size_t j : out) BranchSignature::mix(j);
  }
  return out;
}

template <typename T>
Tensor<T> edge_conv(const Tensor<T>& features, std::size_t k, EdgeConvParams<T>& params, ElementTally* tally) {
  if (features.rank() != 2 || 2 * features.dim(1) != params.h.in()) {
    throw ShapeError("edge_conv: features " + shape_string(features.shape()) + " vs weight " +
                     shape_string(params.h.weight.value().shape()));
  }
  const std::size_t n = features.dim(0);
  const std::size_t d = features.dim(1);
  const std::size_t out_d = params.h.out();
  const std::vector<std::size_t> nbrs = feature_knn(features, k);
  std::vector<std::size_t> self(n * k);
  for (std::size_t i = 0; i < n; ++i) std::fill_n(self.begin() + static_cast<std::ptrdiff_t>(i * k), k, i);

  const Tensor<T> xi = gather_rows(features, std::span<const std::size_t>(self));
  const Tensor<T> xj = gather_rows(features, std::span<const std::size_t>(nbrs));
  const Tensor<T> diff = sub(xj, xi);
  const Tensor<T> parts[] = {xi, diff};
  const Tensor<T> edges = relu(params.h(concat(std::span<const Tensor<T>>(parts))));
  Tensor<T> out = reduce(reshape(edges, {n, k, out_d}), 1, Reduce::max);
  if (tally) tally->add(n * d + 3 * n * k * d + n * k * out_d + n * out_d);
  return out;
}

MemoryModelReport memory_model(std::size_t n, std::size_t k, std::size_t d, std::size_t m) {
  if (n == 0 || k == 0 || d == 0 || m == 0) throw std::invalid_argument("memory_model: arguments must be positive");
  MemoryModelReport r;
  r.proxy_elements = m * n * 5 * d + n * n;
  r.edge_elements = m * n * (2 + 4 * k) * d;
  r.ratio = static_cast<double>(r.proxy_elements) / static_cast<double>(r.edge_elements);
  return r;
}

#define EPC_INSTANTIATE_GRAPH(T)                                                                              \
  template Tensor<T> clouds_to_tensor(std::span<const PointCloud>);                                           \
  template Tensor<T> proxy_points(std::span<const AdjacencyMatrix>, const Tensor<T>&);                        \
  template Tensor<T> proxy_points(const AdjacencyMatrix&, const Tensor<T>&);                                  \
  template struct ProxyConvParams<T>;                                                                         \
  template Tensor<T> proxy_conv(const Tensor<T>&, std::span<const AdjacencyMatrix>, ProxyConvParams<T>&,      \
                                BatchNormMode, ElementTally*);                                                \
  template Tensor<T> proxy_conv(const Tensor<T>&, const AdjacencyMatrix&, ProxyConvParams<T>&, BatchNormMode, \
                                ElementTally*);                                                               \
  template struct EdgeConvParams<T>;                                                                          \
  template std::vector<std::size_t> feature_knn(const Tensor<T>&, std::size_t);                               \
  template Tensor<T> edge_conv(const Tensor<T>&, std::size_t, EdgeConvParams<T>&, ElementTally*);

EPC_INSTANTIATE_GRAPH(float)
EPC_INSTANTIATE_GRAPH(double)

}  // namespace epc
