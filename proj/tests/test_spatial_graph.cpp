#include <cmath>
#include <limits>
#include <random>

#include "doctest.h"
#include "epc/grad_check.hpp"
#include "epc/spatial_graph.hpp"
#include "oracles.hpp"

using namespace epc;

namespace {

template <typename T>
Tensor<T> features_of(const oracle::Matrix& m, Shape shape) {
  return Tensor<T>(std::move(shape), std::vector<T>(m.begin(), m.end()));
}

}  // namespace

TEST_SUITE("spatial_graph") {
  TEST_CASE("adjacency rows hold exactly k neighbors and never the point itself") {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 20; ++trial) {
      const std::size_t n = 10 + rng() % 40;
      const std::size_t k = 1 + rng() % 9;
      const PointCloud cloud = oracle::random_cloud(n, rng);
      const AdjacencyMatrix g = build_adjacency(cloud, k);
      for (std::size_t i = 0; i < n; ++i) {
        std::size_t sum = 0;
        for (auto e : g.row(i)) sum += e;
        CHECK(sum == k);
        CHECK(g(i, i) == 0);
        CHECK(g.neighbors(i) == oracle::knn(cloud, i, k));
      }
    }
  }

  TEST_CASE("include_self puts the point in its own neighborhood") {
    std::mt19937_64 rng(5);
    const PointCloud cloud = oracle::random_cloud(12, rng);
    KnnOptions options;
    options.k = 3;
    options.include_self = true;
    const AdjacencyMatrix g = build_adjacency(cloud, options);
    for (std::size_t i = 0; i < 12; ++i) CHECK(g(i, i) == 1);
  }

  TEST_CASE("distance ties go to the lower index") {
    // Points 1..4 sit at the same distance from point 0.
    const PointCloud cloud({0, 0, 0, 1, 0, 0, -1, 0, 0, 0, 1, 0, 0, -1, 0, 5, 5, 5});
    const AdjacencyMatrix g = build_adjacency(cloud, 2);
    CHECK(g.neighbors(0) == std::vector<std::size_t>{1, 2});
  }

  TEST_CASE("invalid graphs are rejected") {
    std::mt19937_64 rng(6);
    const PointCloud small = oracle::random_cloud(5, rng);
    CHECK_THROWS_AS(build_adjacency(small, 5), std::invalid_argument);
    CHECK_THROWS_AS(build_adjacency(small, 0), std::invalid_argument);
    PointCloud bad = small;
    bad.coords[4] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(build_adjacency(bad, 2), std::invalid_argument);
  }

  TEST_CASE("proxy points equal the gather-and-mean oracle") {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 30; ++trial) {
      const std::size_t n = 17 + rng() % 48;
      const std::size_t k = 1 + rng() % 16;
      const std::size_t d = 1 + rng() % 8;
      const PointCloud cloud = oracle::random_cloud(n, rng);
      const auto f = oracle::random_matrix(n * d, rng);
      const Tensor<double> q = proxy_points(build_adjacency(cloud, k), features_of<double>(f, {n, d}));
      const auto want = oracle::gather_mean(cloud, f, d, k);
      CHECK(oracle::max_abs_diff(std::vector<double>(q.values().begin(), q.values().end()), want) < 1e-12);
    }
  }

  TEST_CASE("batched proxy points use one graph per cloud") {
    std::mt19937_64 rng(8);
    const std::size_t n = 20, d = 3, k = 4;
    const PointCloud a = oracle::random_cloud(n, rng);
    const PointCloud b = oracle::random_cloud(n, rng);
    const AdjacencyMatrix graphs[] = {build_adjacency(a, k), build_adjacency(b, k)};
    const auto f = oracle::random_matrix(2 * n * d, rng);
    const Tensor<double> q = proxy_points(std::span<const AdjacencyMatrix>(graphs), features_of<double>(f, {2, n, d}));
    const auto want_b = oracle::gather_mean(b, oracle::Matrix(f.begin() + n * d, f.end()), d, k);
    for (std::size_t i = 0; i < n * d; ++i) CHECK(q.values()[n * d + i] == doctest::Approx(want_b[i]));
    CHECK_THROWS_AS(proxy_points(std::span<const AdjacencyMatrix>(graphs, 1), features_of<double>(f, {2, n, d})),
                    ShapeError);
  }

  TEST_CASE("proxy conv gradients in both batch-norm modes") {
    std::mt19937_64 rng(9);
    const std::size_t n = 16, d = 4, k = 3;
    const PointCloud cloud = oracle::random_cloud(n, rng);
    const AdjacencyMatrix g = build_adjacency(cloud, k);
    Rng init(1);
    ProxyConvParams<double> conv(d, d, 2, "pc", init);
    Tensor<double> x = features_of<double>(oracle::random_matrix(n * d, rng), {n, d});
    x.set_requires_grad(true);
    const auto weights = features_of<double>(oracle::random_matrix(n * d, rng), {n, d});
    for (auto mode : {BatchNormMode::inference, BatchNormMode::train}) {
      const auto f = [&] { return sum_all(mul(proxy_conv(x, g, conv, mode), weights)); };
      CHECK(finite_difference_check(f, x).max_rel_error < 1e-4);
      CHECK(finite_difference_check(f, conv.stages[1].affine.weight).max_rel_error < 1e-4);
    }
  }

  TEST_CASE("edge conv matches the per-point loop oracle") {
    std::mt19937_64 rng(10);
    for (int trial = 0; trial < 10; ++trial) {
      const std::size_t n = 12 + rng() % 12, d = 1 + rng() % 4, k = 1 + rng() % 6, out = 1 + rng() % 5;
      Rng init(trial);
      EdgeConvParams<double> params(d, out, "ec", init);
      const auto x = oracle::random_matrix(n * d, rng);
      const Tensor<double> y = edge_conv(features_of<double>(x, {n, d}), k, params);
      const auto wv = params.h.weight.value().values();
      const auto bv = params.h.bias.value().values();
      const auto want = oracle::edge_conv(x, n, d, k, oracle::Matrix(wv.begin(), wv.end()),
                                          oracle::Matrix(bv.begin(), bv.end()), out);
      CHECK(oracle::max_abs_diff(std::vector<double>(y.values().begin(), y.values().end()), want) < 1e-10);
    }
  }

  TEST_CASE("edge conv gradient") {
    std::mt19937_64 rng(12);
    Rng init(3);
    EdgeConvParams<double> params(3, 4, "ec", init);
    Tensor<double> x = features_of<double>(oracle::random_matrix(15 * 3, rng), {15, 3});
    x.set_requires_grad(true);
    const auto f = [&] { return sum_all(edge_conv(x, 4, params)); };
    CHECK(finite_difference_check(f, x).max_rel_error < 1e-4);
    CHECK(finite_difference_check(f, params.h.weight).max_rel_error < 1e-4);
  }

  TEST_CASE("instrumented tallies equal the closed-form memory model") {
    std::mt19937_64 rng(13);
    const std::size_t n = 64, k = 6, d = 8, m = 3;
    const PointCloud cloud = oracle::random_cloud(n, rng);
    Rng init(2);

    ElementTally proxy;
    const AdjacencyMatrix g = build_adjacency(cloud, KnnOptions{k, false}, &proxy);
    Tensor<float> x = features_of<float>(oracle::random_matrix(n * d, rng), {n, d});
    for (std::size_t layer = 0; layer < m; ++layer) {
      ProxyConvParams<float> conv(d, d, 1, "pc", init);
      x = proxy_conv(x, g, conv, BatchNormMode::train, &proxy);
    }

    ElementTally edge;
    Tensor<float> e = features_of<float>(oracle::random_matrix(n * d, rng), {n, d});
    for (std::size_t layer = 0; layer < m; ++layer) {
      EdgeConvParams<float> conv(d, d, "ec", init);
      e = edge_conv(e, k, conv, &edge);
    }

    const MemoryModelReport model = memory_model(n, k, d, m);
    CHECK(proxy.elements == model.proxy_elements);
    CHECK(edge.elements == model.edge_elements);
  }

  TEST_CASE("memory model at the reference configuration") {
    const auto r = memory_model(4096, 20, 64, 4);
    CHECK(r.ratio == doctest::Approx(0.2561).epsilon(1e-4 / 0.2561));
    CHECK(r.proxy_elements < r.edge_elements);
    CHECK_THROWS_AS(memory_model(0, 20, 64, 4), std::invalid_argument);
  }
}
