#include <cmath>
#include <limits>
#include <random>
#include <set>
#include <sstream>

#include "doctest.h"
#include "epc/grad_check.hpp"
#include "epc/training.hpp"
#include "model_gradcheck.hpp"
#include "oracles.hpp"

using namespace epc;

namespace {

SubmapIndex grid_index(std::size_t places, std::size_t revisits, double spacing) {
  SubmapIndex index;
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> jitter(-3.0, 3.0);
  for (std::size_t p = 0; p < places; ++p) {
    for (std::size_t t = 0; t < revisits; ++t) {
      SubmapRecord r;
      r.id = p * revisits + t;
      r.northing = double(p) * spacing + jitter(rng);
      r.easting = jitter(rng);
      r.split = Split::train;
      index.records.push_back(r);
    }
  }
  return index;
}

SubmapRecord at(std::uint64_t id, double north, double east) {
  SubmapRecord r;
  r.id = id;
  r.northing = north;
  r.easting = east;
  r.split = Split::train;
  return r;
}

Tensor<double> rows(std::initializer_list<std::initializer_list<double>> values) {
  std::vector<double> flat;
  std::size_t dim = 0;
  for (const auto& row : values) {
    dim = row.size();
    flat.insert(flat.end(), row.begin(), row.end());
  }
  return Tensor<double>({values.size(), dim}, flat);
}

EpcNetConfig small_model() {
  EpcNetConfig c = testing::tiny_config(HeadKind::g_vlad);
  c.k = 6;
  c.width = 8;
  c.mlp_width = 16;
  c.clusters = 4;
  c.output_dim = 8;
  return c;
}

SyntheticConfig easy_data() {
  SyntheticConfig s;
  s.places = 6;
  s.traversals = 3;
  s.points = 48;
  s.grid_spacing = 200.0;
  s.noise_sigma = 0.01;
  s.dropout = 0.0;
  s.seed = 5;
  return s;
}

}  // namespace

TEST_SUITE("training") {
  TEST_CASE("mining on a place grid picks same-place positives and distant negatives") {
    const SubmapIndex index = grid_index(8, 5, 100.0);
    MiningConfig cfg;
    cfg.positives = 2;
    cfg.negatives = 3;
    for (std::uint64_t anchor = 0; anchor < index.size(); ++anchor) {
      const auto q = mine_quadruplet(index, anchor, cfg, anchor + 1);
      REQUIRE(q.has_value());
      CHECK(q->positives.size() == 2);
      CHECK(q->negatives.size() == 3);
      for (auto p : q->positives) {
        CHECK(p / 5 == anchor / 5);
        CHECK(p != anchor);
      }
      std::set<std::uint64_t> taken(q->negatives.begin(), q->negatives.end());
      CHECK(taken.size() == 3);
      for (auto n : q->negatives) CHECK(world_distance(index.at(anchor), index.at(n)) >= 50.0);
      CHECK(world_distance(index.at(anchor), index.at(q->neg_star)) >= 50.0);
      for (auto n : q->negatives) {
        CHECK(n != q->neg_star);
        CHECK(world_distance(index.at(n), index.at(q->neg_star)) >= 50.0);
      }
      const auto again = mine_quadruplet(index, anchor, cfg, anchor + 1);
      CHECK(again->members() == q->members());
    }
  }

  TEST_CASE("forced choice and skip signal") {
    SubmapIndex index;
    index.records = {at(0, 0, 0), at(1, 8, 0), at(2, 100, 0), at(3, 0, 100), at(4, 200, 200)};
    MiningConfig cfg;
    cfg.negatives = 2;
    const auto q = mine_quadruplet(index, 0, cfg, 3);
    REQUIRE(q.has_value());
    CHECK(q->positives == std::vector<std::uint64_t>{1});

    SubmapIndex gap;
    gap.records = {at(0, 0, 0), at(1, 30, 0), at(2, 0, 30)};
    CHECK_FALSE(mine_quadruplet(gap, 0, MiningConfig{}, 1).has_value());
  }

  TEST_CASE("mining respects the split pool") {
    SubmapIndex index = grid_index(6, 3, 100.0);
    for (auto& r : index.records) r.split = r.id % 3 == 2 ? Split::query : Split::train;
    const Split pool[] = {Split::train};
    MiningConfig cfg;
    cfg.negatives = 2;
    for (std::uint64_t anchor : index.ids(Split::train)) {
      const auto q = mine_quadruplet(index, anchor, cfg, 9, pool);
      REQUIRE(q.has_value());
      for (auto id : q->members()) CHECK(index.at(id).split == Split::train);
    }
  }

  TEST_CASE("lazy quadruplet loss worked example") {
    const double a = std::sqrt(0.1), b = std::sqrt(0.7);
    const auto anchor = rows({{0, 0, 0}});
    const auto pos = rows({{a, 0, 0}});
    const auto neg = rows({{0, b, 0}});
    const auto star = rows({{0, b, 0.5}});
    const LossConfig cfg;
    const auto loss = lazy_quadruplet_loss(anchor, pos, neg, star, cfg);
    CHECK(loss.item() == doctest::Approx(0.05).epsilon(1e-12));
  }

  TEST_CASE("lazy quadruplet loss is zero for well separated clusters") {
    const auto anchor = rows({{0, 0}});
    const auto pos = rows({{0.01, 0}});
    const auto neg = rows({{3, 0}, {0, 3}});
    const auto star = rows({{-3, -3}});
    CHECK(lazy_quadruplet_loss(anchor, pos, neg, star, LossConfig{}).item() == 0.0);
  }

  TEST_CASE("lazy quadruplet loss matches the brute-force loop") {
    std::mt19937_64 rng(31);
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t p = 2, n = 4, dim = 1 + rng() % 6;
      const auto m = oracle::random_matrix((p + n + 2) * dim, rng, 0.5);
      const Tensor<double> batch({p + n + 2, dim}, m);
      const LossConfig cfg;
      const double got = lazy_quadruplet_loss(batch, p, n, cfg).item();
      CHECK(std::abs(got - oracle::lazy_quadruplet(m, dim, p, n, cfg.alpha, cfg.beta)) < 1e-7);
    }
  }

  TEST_CASE("lazy quadruplet loss errors and variants") {
    const auto one = rows({{1, 0}});
    const Tensor<double> none({0, 2});
    CHECK_THROWS_AS(lazy_quadruplet_loss(one, none, one, one, LossConfig{}), std::invalid_argument);
    CHECK_THROWS_AS(lazy_quadruplet_loss(one, one, none, one, LossConfig{}), std::invalid_argument);
    CHECK_THROWS_AS(lazy_quadruplet_loss(rows({{0, 0}, {1, 1}}), 1, 1, LossConfig{}), ShapeError);

    // Positives at squared distances 0.1 and 0.3, the negative at 0.5, neg*
    // at 0.01 from the anchor and 0.51 from the negative.
    const auto anchor = rows({{0, 0, 0}});
    const auto pos = rows({{std::sqrt(0.1), 0, 0}, {0, 0, std::sqrt(0.3)}});
    const auto neg = rows({{0, std::sqrt(0.5), 0}});
    const auto star = rows({{0, 0, -0.1}});
    LossConfig cfg;
    CHECK(lazy_quadruplet_loss(anchor, pos, neg, star, cfg).item() == doctest::Approx(0.1));
    cfg.best_positive = false;
    CHECK(lazy_quadruplet_loss(anchor, pos, neg, star, cfg).item() == doctest::Approx(0.2));
    cfg.best_positive = true;
    cfg.negstar_per_negative = false;
    CHECK(lazy_quadruplet_loss(anchor, pos, neg, star, cfg).item() == doctest::Approx(0.1 + 0.29));
    LossConfig bad;
    bad.alpha = -1;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  }

  TEST_CASE("loss gradients") {
    std::mt19937_64 rng(32);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      Tensor<double> batch({8, 5}, oracle::random_matrix(40, rng, 0.4));
      batch.set_requires_grad(true);
      LossConfig cfg;
      cfg.alpha = 1.5;
      const auto r = finite_difference_check([&] { return lazy_quadruplet_loss(batch, 2, 4, cfg); }, batch);
      CHECK(r.max_rel_error < 1e-6);
    }
    Tensor<double> student({3, 4}, oracle::random_matrix(12, rng));
    const Tensor<double> teacher({3, 4}, oracle::random_matrix(12, rng));
    student.set_requires_grad(true);
    CHECK(finite_difference_check([&] { return sse_loss(student, teacher); }, student).max_rel_error < 1e-6);
  }

  TEST_CASE("SSE and the combined objective") {
    const auto s = rows({{1, 2}, {3, 4}});
    const auto t = rows({{1, 0}, {0, 4}});
    CHECK(sse_loss(s, t).item() == doctest::Approx(4 + 9));
    CHECK(sse_loss(s, s).item() == 0.0);
    CHECK_THROWS_AS(sse_loss(s, rows({{1, 2}})), ShapeError);
    LossConfig cfg;
    cfg.lambda = 0.1;
    CHECK(final_loss(Tensor<double>::scalar(0.5), Tensor<double>::scalar(2.0), cfg).item() == doctest::Approx(0.7));
  }

  TEST_CASE("Adam takes a learning-rate sized first step against the gradient") {
    Parameter<double> p("p", Tensor<double>({2}, {1.0, -2.0}));
    AdamConfig cfg;
    cfg.learning_rate = 0.01;
    Adam<double> adam({&p}, cfg);
    CHECK_THROWS_AS(adam.step(), std::logic_error);
    {
      TapeScope<double> scope;
      scope.tape().backward(sum_all(mul(p.value(), p.value())));
    }
    adam.step();
    CHECK(p.value().values()[0] == doctest::Approx(0.99).epsilon(1e-9));
    CHECK(p.value().values()[1] == doctest::Approx(-1.99).epsilon(1e-9));
    CHECK(adam.steps() == 1);
    CHECK_THROWS_AS(adam.step(), std::logic_error);
  }

  TEST_CASE("teacher training lowers the loss and is reproducible") {
    const Dataset data = synthesize_in_memory(easy_data());
    TrainOptions options;
    options.epochs = 30;
    options.seed = 3;
    options.mining.negatives = 2;
    options.adam.learning_rate = 1e-3;
    EpcModel<float> a(small_model(), 1);
    const auto trace = train_teacher(a, data, options);
    REQUIRE(trace.size() == 30);
    CHECK(trace.back().lazy < trace.front().lazy);

    options.epochs = 2;
    EpcModel<float> b(small_model(), 1);
    EpcModel<float> c(small_model(), 1);
    std::ostringstream log_b;
    options.log = &log_b;
    const auto tb = train_teacher(b, data, options);
    TrainOptions quiet = options;
    quiet.log = nullptr;
    const auto tc = train_teacher(c, data, quiet);
    CHECK(tb[1].lazy == tc[1].lazy);
    CHECK(checkpoint_hash(b) == checkpoint_hash(c));
    CHECK(log_b.str().rfind("epoch=1 lazy=", 0) == 0);
  }

  TEST_CASE("distillation leaves the teacher untouched and logs the SSE") {
    const Dataset data = synthesize_in_memory(easy_data());
    EpcModel<float> teacher(small_model(), 1);
    EpcNetConfig sc = EpcNetConfig::epcnet_l();
    sc.k = 6;
    sc.width = 8;
    sc.mlp_width = 16;
    sc.output_dim = 8;
    EpcModel<float> student(sc, 2);
    const auto before = checkpoint_hash(teacher);
    TrainOptions options;
    options.epochs = 2;
    options.mining.negatives = 2;
    for (double lambda : {0.0, 0.1}) {
      options.loss.lambda = lambda;
      const auto trace = train_student_distill(student, teacher, data, options);
      CHECK(trace.back().sse > 0.0);
    }
    CHECK(checkpoint_hash(teacher) == before);

    sc.output_dim = 4;
    EpcModel<float> narrow(sc, 2);
    CHECK_THROWS_AS(train_student_distill(narrow, teacher, data, options), std::invalid_argument);
  }

  TEST_CASE("a non-finite loss aborts training") {
    const Dataset data = synthesize_in_memory(easy_data());
    EpcModel<float> model(small_model(), 1);
    for (float& v : model.parameters().back()->value().values()) v = std::numeric_limits<float>::quiet_NaN();
    TrainOptions options;
    options.mining.negatives = 2;
    CHECK_THROWS_AS(train_teacher(model, data, options), NumericError);
  }
}
