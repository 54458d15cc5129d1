#include <algorithm>
#include <random>
#include <sstream>

#include "doctest.h"
#include "epc/binary_io.hpp"
#include "epc/descriptor_heads.hpp"
#include "epc/grad_check.hpp"
#include "oracles.hpp"

using namespace epc;

namespace {

std::vector<double> as_vector(const Tensor<double>& t) { return {t.values().begin(), t.values().end()}; }

Tensor<double> tensor(const oracle::Matrix& m, Shape shape) { return Tensor<double>(std::move(shape), m); }

Tensor<double> permute_points(const Tensor<double>& f, const std::vector<std::size_t>& order) {
  return gather_rows(f, std::span<const std::size_t>(order));
}

}  // namespace

TEST_SUITE("descriptor_heads") {
  TEST_CASE("vlad aggregation equals the double-loop oracle") {
    std::mt19937_64 rng(21);
    for (int trial = 0; trial < 25; ++trial) {
      const std::size_t n = 2 + rng() % 30, d = 1 + rng() % 8, clusters = 1 + rng() % 8;
      Rng init(trial);
      VladParams<double> vlad(d, clusters, "vlad", init);
      const auto f = oracle::random_matrix(n * d, rng);
      const auto v = vlad_aggregate(tensor(f, {n, d}), vlad);
      const auto c = vlad.centers.value().values();
      const auto w = vlad.assign.weight.value().values();
      const auto b = vlad.assign.bias.value().values();
      const auto want = oracle::vlad(f, {c.begin(), c.end()}, {w.begin(), w.end()}, {b.begin(), b.end()}, n, d, clusters);
      CHECK(oracle::max_abs_diff(as_vector(v), want) < 1e-10);
    }
  }

  TEST_CASE("soft assignment rows sum to one") {
    std::mt19937_64 rng(22);
    Rng init(1);
    VladParams<double> vlad(5, 7, "vlad", init);
    const auto a = soft_assign(tensor(oracle::random_matrix(2 * 9 * 5, rng), {2, 9, 5}), vlad);
    REQUIRE(a.shape() == Shape{2, 9, 7});
    for (std::size_t r = 0; r < 18; ++r) {
      double s = 0;
      for (std::size_t q = 0; q < 7; ++q) s += a.values()[r * 7 + q];
      CHECK(s == doctest::Approx(1.0));
    }
  }

  TEST_CASE("grouped FC with one group is a plain fully connected layer") {
    std::mt19937_64 rng(23);
    Rng init(4);
    GfcParams<double> gfc(24, 5, 1, "gfc", init);
    const auto x = tensor(oracle::random_matrix(3 * 24, rng), {3, 24});
    const auto y = grouped_fc(x, gfc);
    const auto fc = linear(x, gfc.weight.value(), reshape(gfc.bias.value(), {5}));
    CHECK(oracle::max_abs_diff(as_vector(y), as_vector(fc)) < 1e-12);
  }

  TEST_CASE("grouped FC sums segment outputs with their group biases") {
    std::mt19937_64 rng(24);
    Rng init(5);
    const std::size_t groups = 3, seg = 4, out = 2;
    GfcParams<double> gfc(groups * seg, out, groups, "gfc", init);
    const auto x = oracle::random_matrix(groups * seg, rng);
    const auto y = grouped_fc(tensor(x, {groups * seg}), gfc);
    const auto w = gfc.weight.value().values();
    const auto b = gfc.bias.value().values();
    for (std::size_t o = 0; o < out; ++o) {
      double want = 0;
      for (std::size_t g = 0; g < groups; ++g) {
        want += b[g * out + o];
        for (std::size_t c = 0; c < seg; ++c) want += x[g * seg + c] * w[c * out + o];
      }
      CHECK(y.values()[o] == doctest::Approx(want));
    }
  }

  TEST_CASE("grouped FC parameter count") {
    Rng init(0);
    for (std::size_t g : {1, 2, 4, 8}) {
      GfcParams<float> gfc(64, 16, g, "gfc", init);
      CHECK(gfc.weight.size() + gfc.bias.size() == gfc_param_count(8, 8, 16, g));
    }
    CHECK(gfc_param_count(64, 1024, 256, 4) == 64 * 1024 * 256 / 4 + 4 * 256);
    CHECK_THROWS_AS(gfc_param_count(3, 5, 8, 2), std::invalid_argument);
    CHECK_THROWS_AS(GfcParams<float>(15, 4, 2, "gfc", init), std::invalid_argument);
  }

  TEST_CASE("descriptors are unit length and invariant to point order") {
    std::mt19937_64 rng(25);
    const std::size_t n = 20, d = 6;
    Rng init(6);
    VladParams<double> vlad(d, 4, "vlad", init);
    GfcParams<double> gfc(4 * d, 8, 2, "gfc", init);
    GatingParams<double> gate(8, "gate", init);
    MaxPoolHeadParams<double> head(d, 8, "fc", init);
    const auto f = tensor(oracle::random_matrix(n * d, rng), {n, d});
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);

    const auto a = g_vlad_forward(f, vlad, gfc, &gate);
    const auto b = g_vlad_forward(permute_points(f, order), vlad, gfc, &gate);
    CHECK(oracle::max_abs_diff(as_vector(a), as_vector(b)) < 1e-12);
    double norm = 0;
    for (double v : a.values()) norm += v * v;
    CHECK(norm == doctest::Approx(1.0));

    const auto m1 = maxpool_head(f, head);
    const auto m2 = maxpool_head(permute_points(f, order), head);
    CHECK(oracle::max_abs_diff(as_vector(m1), as_vector(m2)) < 1e-12);
  }

  TEST_CASE("batched G-VLAD equals per-cloud G-VLAD") {
    std::mt19937_64 rng(26);
    const std::size_t n = 10, d = 3;
    Rng init(7);
    VladParams<double> vlad(d, 4, "vlad", init);
    GfcParams<double> gfc(4 * d, 6, 4, "gfc", init);
    const auto f = oracle::random_matrix(2 * n * d, rng);
    const auto both = g_vlad_forward(tensor(f, {2, n, d}), vlad, gfc);
    const auto second = g_vlad_forward(tensor(oracle::Matrix(f.begin() + n * d, f.end()), {n, d}), vlad, gfc);
    for (std::size_t o = 0; o < 6; ++o) CHECK(both.values()[6 + o] == doctest::Approx(second.values()[o]));
  }

  TEST_CASE("head gradients") {
    std::mt19937_64 rng(27);
    const std::size_t n = 9, d = 4;
    Rng init(8);
    VladParams<double> vlad(d, 3, "vlad", init);
    GfcParams<double> gfc(3 * d, 5, 3, "gfc", init);
    GatingParams<double> gate(5, "gate", init);
    MaxPoolHeadParams<double> head(d, 5, "fc", init);
    Tensor<double> f = tensor(oracle::random_matrix(n * d, rng), {n, d});
    f.set_requires_grad(true);
    const auto w = tensor(oracle::random_matrix(5, rng), {5});
    const auto gv = [&] { return sum_all(mul(g_vlad_forward(f, vlad, gfc, &gate), w)); };
    CHECK(finite_difference_check(gv, f).max_rel_error < 1e-4);
    CHECK(finite_difference_check(gv, vlad.centers).max_rel_error < 1e-4);
    CHECK(finite_difference_check(gv, vlad.assign.weight).max_rel_error < 1e-4);
    CHECK(finite_difference_check(gv, gfc.weight).max_rel_error < 1e-4);
    CHECK(finite_difference_check(gv, gfc.bias).max_rel_error < 1e-4);
    CHECK(finite_difference_check(gv, gate.gate.weight).max_rel_error < 1e-4);
    const auto mp = [&] { return sum_all(mul(maxpool_head(f, head), w)); };
    CHECK(finite_difference_check(mp, f).max_rel_error < 1e-4);
    CHECK(finite_difference_check(mp, head.fc.weight).max_rel_error < 1e-4);
  }

  TEST_CASE("descriptor table round trip and layout") {
    DescriptorTable table;
    table.append(7, std::vector<float>{1, 2, 3});
    table.append(9, std::vector<float>{4, 5, 6});
    CHECK_THROWS_AS(table.append(3, std::vector<float>{1}), ShapeError);
    std::stringstream buf;
    write_descriptors(buf, table);
    CHECK(buf.str().size() == 12 + 2 * 3 * 4 + 2 * 8);
    CHECK(buf.str().substr(0, 4) == "EPCD");
    const auto back = read_descriptors(buf);
    CHECK(back.dim == 3);
    CHECK(back.ids == table.ids);
    CHECK(back.values == table.values);

    std::string bytes = buf.str();
    bytes.resize(20);
    std::stringstream cut(bytes);
    CHECK_THROWS_AS(read_descriptors(cut), FormatError);
  }
}
