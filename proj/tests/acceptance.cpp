// Acceptance run: one PASS/FAIL line per criterion. Pass criterion numbers as
// arguments to run a subset, e.g. `epc_acceptance 1 2 7`; `--report FILE`
// also writes the result lines to FILE.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "epc/evaluation.hpp"
#include "epc/grad_check.hpp"
#include "epc/training.hpp"
#include "model_gradcheck.hpp"
#include "oracles.hpp"

using namespace epc;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), format, args...);
  return buf;
}

std::vector<double> values_of(const Tensor<double>& t) { return {t.values().begin(), t.values().end()}; }

// --- 1 ----------------------------------------------------------------------

Outcome memory_ratio() {
  const MemoryModelReport ref = memory_model(4096, 20, 64, 4);
  const bool ratio_ok = std::abs(ref.ratio - 0.2561) <= 1e-4;

  // Instrumented layers at n = 1024 (same k, d, m) against the same formulas.
  const std::size_t n = 1024, k = 20, d = 64, m = 4;
  std::mt19937_64 rng(1);
  const PointCloud cloud = oracle::random_cloud(n, rng, 20.0);
  Rng init(1);
  ElementTally proxy;
  const AdjacencyMatrix g = build_adjacency(cloud, KnnOptions{k, false}, &proxy);
  const auto fv = oracle::random_matrix(n * d, rng);
  Tensor<float> x({n, d}, std::vector<float>(fv.begin(), fv.end()));
  {
    NoGradScope<float> off;
    for (std::size_t layer = 0; layer < m; ++layer) {
      ProxyConvParams<float> conv(d, d, 1, "pc", init);
      x = proxy_conv(x, g, conv, BatchNormMode::train, &proxy);
    }
  }
  ElementTally edge;
  Tensor<float> e({n, d}, std::vector<float>(fv.begin(), fv.end()));
  {
    NoGradScope<float> off;
    for (std::size_t layer = 0; layer < m; ++layer) {
      EdgeConvParams<float> conv(d, d, "ec", init);
      e = edge_conv(e, k, conv, &edge);
    }
  }
  const MemoryModelReport model = memory_model(n, k, d, m);
  const bool tally_ok = proxy.elements == model.proxy_elements && edge.elements == model.edge_elements;
  return {ratio_ok && tally_ok,
          fmt("ratio=%.6f (target 0.2561 +- 1e-4); tallies at n=%zu: proxy %zu vs %zu, edge %zu vs %zu", ref.ratio,
              n, proxy.elements, model.proxy_elements, edge.elements, model.edge_elements)};
}

// --- 2 ----------------------------------------------------------------------

Outcome parameter_table() {
  const std::size_t groups[] = {1, 2, 4, 8, 16, 32};
  const double expected[] = {17.28, 8.89, 4.70, 2.60, 1.56, 1.03};
  bool ok = true;
  std::string detail;
  std::vector<std::size_t> totals;
  EpcNetConfig c = EpcNetConfig::epcnet();
  for (std::size_t i = 0; i < 6; ++i) {
    c.groups = groups[i];
    const std::size_t total = count_params(c);
    totals.push_back(total);
    const double rel = std::abs(double(total) / 1e6 - expected[i]) / expected[i];
    ok = ok && rel <= 0.02;
    detail += fmt("G=%zu %.2fM (%+.1f%%) ", groups[i], double(total) / 1e6, 100.0 * (double(total) / 1e6 - expected[i]) / expected[i]);
  }
  bool diffs = true;
  for (std::size_t i = 0; i + 1 < 6; ++i) {
    const auto gfc_a = gfc_param_count(c.clusters, c.mlp_width, c.output_dim, groups[i]);
    const auto gfc_b = gfc_param_count(c.clusters, c.mlp_width, c.output_dim, groups[i + 1]);
    diffs = diffs && totals[i] - totals[i + 1] == gfc_a - gfc_b;
  }
  const double small = double(count_params(EpcNetConfig::epcnet_l())) / 1e6;
  const bool small_ok = std::abs(small - 0.41) / 0.41 <= 0.05;
  detail += fmt("| differences %s | EPC-Net-L %.4fM", diffs ? "exact" : "MISMATCH", small);
  return {ok && diffs && small_ok, detail};
}

// --- 3 ----------------------------------------------------------------------

Outcome oracle_equivalence() {
  std::mt19937_64 rng(3);
  double proxy_err = 0.0, vlad_err = 0.0, loss_err = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t k = 1 + rng() % 16;
    const std::size_t n = k + 1 + rng() % (64 - k);
    const std::size_t d = 1 + rng() % 16;
    const PointCloud cloud = oracle::random_cloud(n, rng);
    const auto f = oracle::random_matrix(n * d, rng);
    const Tensor<double> q = proxy_points(build_adjacency(cloud, k), Tensor<double>({n, d}, f));
    proxy_err = std::max(proxy_err, oracle::max_abs_diff(values_of(q), oracle::gather_mean(cloud, f, d, k)));
  }
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng() % 64, d = 1 + rng() % 16, clusters = 1 + rng() % 16;
    Rng init(trial);
    VladParams<double> vlad(d, clusters, "vlad", init);
    const auto f = oracle::random_matrix(n * d, rng);
    const auto c = values_of(vlad.centers.value());
    const auto w = values_of(vlad.assign.weight.value());
    const auto b = values_of(vlad.assign.bias.value());
    const auto v = vlad_aggregate(Tensor<double>({n, d}, f), vlad);
    vlad_err = std::max(vlad_err, oracle::max_abs_diff(values_of(v), oracle::vlad(f, c, w, b, n, d, clusters)));
  }
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t p = 1 + rng() % 4, nn = 1 + rng() % 6, dim = 1 + rng() % 32;
    const auto m = oracle::random_matrix((p + nn + 2) * dim, rng, 0.3);
    const LossConfig cfg;
    const double got = lazy_quadruplet_loss(Tensor<double>({p + nn + 2, dim}, m), p, nn, cfg).item();
    loss_err = std::max(loss_err, std::abs(got - oracle::lazy_quadruplet(m, dim, p, nn, cfg.alpha, cfg.beta)));
  }
  return {proxy_err <= 1e-6 && vlad_err <= 1e-6 && loss_err <= 1e-7,
          fmt("max |diff| over 100 cases each: proxy %.2e (tol 1e-6), vlad %.2e (tol 1e-6), lazy loss %.2e (tol 1e-7)",
              proxy_err, vlad_err, loss_err)};
}

// --- 4 ----------------------------------------------------------------------

struct SuiteEntry {
  std::string name;
  double worst = 0.0;
};

Tensor<double> weighted(const Tensor<double>& y, std::mt19937_64& rng) {
  return sum_all(mul(y, Tensor<double>(y.shape(), oracle::random_matrix(y.size(), rng))));
}

// Leaves may be tensors or parameters.
template <typename... Leaf>
double check_all(const std::function<Tensor<double>()>& f, Leaf&... leaves) {
  double worst = 0.0;
  ((worst = std::max(worst, finite_difference_check(f, leaves).max_rel_error)), ...);
  return worst;
}

Outcome gradient_suite() {
  std::vector<SuiteEntry> entries;
  auto record = [&](const std::string& name, double err) {
    auto it = std::find_if(entries.begin(), entries.end(), [&](const auto& e) { return e.name == name; });
    if (it == entries.end()) entries.push_back({name, err});
    else it->worst = std::max(it->worst, err);
  };
  double bias_grad = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(100 + seed);
    Rng init(seed);
    const std::size_t n = 14, d = 4;
    const PointCloud cloud = oracle::random_cloud(n, rng);
    const AdjacencyMatrix g = build_adjacency(cloud, 3);
    Tensor<double> x({n, d}, oracle::random_matrix(n * d, rng));
    x.set_requires_grad(true);
    const std::uint64_t probe_seed = rng();
    auto probe = [&](const Tensor<double>& y) {
      std::mt19937_64 r(probe_seed);
      return weighted(y, r);
    };

    for (auto mode : {BatchNormMode::inference, BatchNormMode::train}) {
      const char* tag = mode == BatchNormMode::train ? " (train BN)" : " (inference BN)";
      DenseBlock<double> block(d, 5, "dense", init);
      block.bn.gamma.value().values()[0] = 1.3;
      record(std::string("dense block") + tag,
             check_all([&] { return probe(block.forward(x, mode)); },
                       x, block.affine.weight, block.bn.gamma, block.bn.beta));
      ProxyConvParams<double> conv(d, d, 2, "pc", init);
      record(std::string("proxy conv") + tag,
             check_all([&] { return probe(proxy_conv(x, g, conv, mode)); },
                       x, conv.stages[0].affine.weight, conv.stages[1].affine.weight, conv.stages[1].bn.gamma));
    }
    record("proxy points", check_all([&] { return probe(proxy_points(g, x)); }, x));
    EdgeConvParams<double> ec(d, 3, "ec", init);
    record("edge conv", check_all([&] { return probe(edge_conv(x, 3, ec)); }, x, ec.h.weight, ec.h.bias));

    VladParams<double> vlad(d, 3, "vlad", init);
    GfcParams<double> gfc(3 * d, 6, 2, "gfc", init);
    GatingParams<double> gate(6, "gate", init);
    MaxPoolHeadParams<double> head(d, 6, "fc", init);
    record("soft assign", check_all([&] { return probe(soft_assign(x, vlad)); }, x, vlad.assign.weight));
    record("vlad aggregate",
           check_all([&] { return probe(vlad_aggregate(x, vlad)); }, x, vlad.centers, vlad.assign.bias));
    Tensor<double> flat({2, 3 * d}, oracle::random_matrix(6 * d, rng));
    flat.set_requires_grad(true);
    record("grouped fc", check_all([&] { return probe(grouped_fc(flat, gfc)); }, flat, gfc.weight, gfc.bias));
    Tensor<double> z({2, 6}, oracle::random_matrix(12, rng));
    z.set_requires_grad(true);
    record("context gating", check_all([&] { return probe(context_gating(z, gate)); }, z, gate.gate.weight));
    record("g-vlad head", check_all([&] { return probe(g_vlad_forward(x, vlad, gfc, &gate)); },
                                    x, vlad.centers, gfc.weight, gate.gate.bias));
    record("maxpool head", check_all([&] { return probe(maxpool_head(x, head)); }, x, head.fc.weight));

    Tensor<double> batch({7, 5}, oracle::random_matrix(35, rng, 0.4));
    batch.set_requires_grad(true);
    LossConfig loss;
    loss.alpha = 1.0;
    record("lazy quadruplet loss", check_all([&] { return lazy_quadruplet_loss(batch, 1, 4, loss); }, batch));
    const Tensor<double> target({7, 5}, oracle::random_matrix(35, rng));
    record("sse loss", check_all([&] { return sse_loss(batch, target); }, batch));

    for (HeadKind h : {HeadKind::g_vlad, HeadKind::maxpool}) {
      for (auto mode : {BatchNormMode::inference, BatchNormMode::train}) {
        const auto r = testing::check_model_gradients(h, mode, seed);
        record(std::string(h == HeadKind::g_vlad ? "EPC-Net" : "EPC-Net-L") +
                   (mode == BatchNormMode::train ? " + lazy loss (train BN)" : " + lazy loss (inference BN)"),
               r.worst);
        bias_grad = std::max(bias_grad, r.pre_norm_bias_grad);
      }
    }
  }
  double worst = 0.0;
  std::string worst_name;
  for (const auto& e : entries) {
    if (e.worst >= worst) {
      worst = e.worst;
      worst_name = e.name;
    }
  }
  const bool ok = worst < 1e-4 && bias_grad < 1e-10;
  return {ok, fmt("%zu checks x 10 seeds, worst relative error %.2e (%s), tol 1e-4; pre-BN bias |grad| <= %.1e",
                  entries.size(), worst, worst_name.c_str(), bias_grad)};
}

// --- 5 ----------------------------------------------------------------------

Outcome structural_invariants() {
  std::mt19937_64 rng(5);
  double perm = 0.0;
  for (HeadKind h : {HeadKind::g_vlad, HeadKind::maxpool}) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      EpcNetConfig c = testing::tiny_config(h);
      c.k = 6;
      EpcModel<double> model(c, seed);
      const PointCloud cloud = oracle::random_cloud(40, rng);
      std::vector<std::size_t> order(40);
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng);
      std::vector<float> xyz;
      for (std::size_t i : order) xyz.insert(xyz.end(), cloud.coords.begin() + 3 * i, cloud.coords.begin() + 3 * i + 3);
      const PointCloud shuffled(xyz);
      NoGradScope<double> off;
      const auto a = model.forward(std::span<const PointCloud>(&cloud, 1), BatchNormMode::inference);
      const auto b = model.forward(std::span<const PointCloud>(&shuffled, 1), BatchNormMode::inference);
      perm = std::max(perm, oracle::max_abs_diff(values_of(a), values_of(b)));
    }
  }

  double gfc = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    Rng init(trial);
    GfcParams<double> params(32, 8, 1, "gfc", init);
    const Tensor<double> x({3, 32}, oracle::random_matrix(96, rng));
    const auto y = grouped_fc(x, params);
    const auto fc = linear(x, params.weight.value(), reshape(params.bias.value(), {8}));
    gfc = std::max(gfc, oracle::max_abs_diff(values_of(y), values_of(fc)));
  }

  bool rows_ok = true;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t k = 1 + rng() % 20, n = k + 1 + rng() % 100;
    const AdjacencyMatrix g = build_adjacency(oracle::random_cloud(n, rng), k);
    for (std::size_t i = 0; i < n; ++i) {
      const auto row = g.row(i);
      rows_ok = rows_ok && std::accumulate(row.begin(), row.end(), std::size_t{0}) == k;
    }
  }

  bool monotone = true;
  for (int trial = 0; trial < 20; ++trial) {
    SubmapIndex index;
    DescriptorTable db, q;
    for (std::uint64_t i = 0; i < 60; ++i) {
      SubmapRecord r;
      r.id = i;
      r.northing = double(rng() % 12) * 40.0;
      r.split = i < 45 ? Split::database : Split::query;
      index.records.push_back(r);
      const auto v = oracle::random_matrix(6, rng);
      (i < 45 ? db : q).append(i, std::vector<float>(v.begin(), v.end()));
    }
    std::vector<std::size_t> ks(45);
    std::iota(ks.begin(), ks.end(), 1);
    const EvalReport r = evaluate(db, q, index, ks);
    for (std::size_t k = 2; k <= 45; ++k) monotone = monotone && r.recall_at.at(k) >= r.recall_at.at(k - 1);
  }
  return {perm < 1e-6 && gfc < 1e-6 && rows_ok && monotone,
          fmt("permutation |diff| %.2e (tol 1e-6), GFC(G=1) vs FC %.2e (tol 1e-6), adjacency row sums %s, "
              "recall@K %s",
              perm, gfc, rows_ok ? "= k" : "WRONG", monotone ? "monotone" : "NOT monotone")};
}

// --- 6 ----------------------------------------------------------------------

EpcNetConfig desk(EpcNetConfig c) {
  c.k = 8;
  c.width /= 2;
  c.mlp_width /= 2;
  c.clusters /= 2;
  c.output_dim /= 2;
  return c;
}

double recall_at_1(EpcModel<float>& model, const Dataset& data) {
  const std::size_t one[] = {1};
  const EvalReport r = evaluate(build_descriptor_db(model, data, Split::database),
                                build_descriptor_db(model, data, Split::query), data.index(), one);
  return r.recall_at.at(1);
}

constexpr double kDeskLearningRate = 1e-4;

Outcome learning_signal() {
  const auto start = std::chrono::steady_clock::now();
  SyntheticConfig synth;
  synth.places = 16;
  synth.traversals = 5;
  synth.points = 256;
  synth.seed = 0;
  const Dataset data = synthesize_in_memory(synth);

  TrainOptions options;
  options.adam.learning_rate = kDeskLearningRate;
  options.epochs = 50;
  options.seed = 1;
  EpcModel<float> teacher(desk(EpcNetConfig::epcnet()), 1);
  train_teacher(teacher, data, options);
  const double teacher_r1 = recall_at_1(teacher, data);
  std::printf("  teacher: recall@1 %.4f after 50 epochs\n", teacher_r1);
  std::fflush(stdout);

  const double lambdas[] = {0.0, 0.1, 1.0};
  std::vector<std::vector<double>> recalls(3);
  options.epochs = 40;
  for (std::size_t li = 0; li < 3; ++li) {
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
      EpcModel<float> student(desk(EpcNetConfig::epcnet_l()), 100 + seed);
      options.seed = seed;
      options.loss.lambda = lambdas[li];
      train_student_distill(student, teacher, data, options);
      recalls[li].push_back(recall_at_1(student, data));
      std::printf("  student lambda=%.1f seed=%llu: recall@1 %.4f\n", lambdas[li],
                  static_cast<unsigned long long>(seed), recalls[li].back());
      std::fflush(stdout);
    }
  }
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
  };
  const double m0 = median(recalls[0]), m01 = median(recalls[1]), m1 = median(recalls[2]);
  const double minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() / 60.0;
  const bool ok = teacher_r1 >= 0.9 && m01 >= m0 && m01 >= m1 && minutes <= 15.0;
  return {ok, fmt("teacher recall@1 %.4f (>= 0.9); student medians lambda=0: %.4f, 0.1: %.4f, 1.0: %.4f; %.1f min "
                  "(<= 15)",
                  teacher_r1, m0, m01, m1, minutes)};
}

// --- 7 ----------------------------------------------------------------------

Outcome flop_sanity() {
  const double big = double(count_flops(EpcNetConfig::epcnet(), 4096).flop_count) / 1e9;
  const double small = double(count_flops(EpcNetConfig::epcnet_l(), 4096).flop_count) / 1e9;
  const double ratio = big / small;
  const bool ok = ratio >= 2.0 && ratio <= 3.0 && std::abs(big - 3.25) / 3.25 <= 0.25 &&
                  std::abs(small - 1.37) / 1.37 <= 0.25;
  return {ok, fmt("EPC-Net %.3fG (%+.1f%% vs 3.25G), EPC-Net-L %.3fG (%+.1f%% vs 1.37G), ratio %.3f in [2, 3]", big,
                  100.0 * (big - 3.25) / 3.25, small, 100.0 * (small - 1.37) / 1.37, ratio)};
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  const std::pair<const char*, Outcome (*)()> criteria[] = {
      {"memory-ratio reconciliation", memory_ratio},   {"parameter-table reconciliation", parameter_table},
      {"oracle equivalence", oracle_equivalence},      {"gradient suite", gradient_suite},
      {"structural invariants", structural_invariants}, {"desk-scale learning signal", learning_signal},
      {"FLOP sanity", flop_sanity},
  };
  std::set<int> selected;
  std::ofstream report;
  for (int i = 1; i < argc; ++i) {
    if (std::string(argv[i]) == "--report" && i + 1 < argc) {
      report.open(argv[++i]);
      continue;
    }
    selected.insert(std::atoi(argv[i]));
  }
  int failures = 0;
  for (int i = 0; i < 7; ++i) {
    if (!selected.empty() && !selected.count(i + 1)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const std::string line = fmt("%s criterion %d (%s): ", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first) +
                             o.detail + fmt(" [%.1fs]", secs);
    std::printf("%s\n", line.c_str());
    std::fflush(stdout);
    if (report.is_open()) report << line << '\n' << std::flush;
    failures += o.pass ? 0 : 1;
  }
  return failures == 0 ? 0 : 1;
}
