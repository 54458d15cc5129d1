#include "epc/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <optional>
#include <random>

#include "detail/parse.hpp"

namespace epc {

std::vector<std::uint64_t> Quadruplet::members() const {
  std::vector<std::uint64_t> out{anchor};
  out.insert(out.end(), positives.begin(), positives.end());
  out.insert(out.end(), negatives.begin(), negatives.end());
  out.push_back(neg_star);
  return out;
}

std::optional<Quadruplet> mine_quadruplet(const SubmapIndex& index, std::uint64_t anchor, const MiningConfig& config,
                                          std::uint64_t seed, std::span<const Split> pool) {
  static constexpr Split kDefaultPool[] = {Split::database, Split::train};
  if (pool.empty()) pool = kDefaultPool;
  auto in_pool = [&](const SubmapRecord& r) { return std::find(pool.begin(), pool.end(), r.split) != pool.end(); };
  const SubmapRecord& a = index.at(anchor);

  std::vector<const SubmapRecord*> pos;
  std::vector<const SubmapRecord*> neg;
  for (const auto& r : index.records) {
    if (r.id == anchor || !in_pool(r)) continue;
    const double d = world_distance(a, r);
    if (d <= config.positive_radius) pos.push_back(&r);
    if (d >= config.negative_radius) neg.push_back(&r);
  }
  if (pos.size() < config.positives || neg.size() < config.negatives || config.positives == 0 ||
      config.negatives == 0) {
    return std::nullopt;
  }
  std::mt19937_64 rng(seed);
  std::shuffle(pos.begin(), pos.end(), rng);
  std::shuffle(neg.begin(), neg.end(), rng);
  pos.resize(config.positives);
  neg.resize(config.negatives);

  std::vector<const SubmapRecord*> star;
  for (const auto& r : index.records) {
    if (r.id == anchor || !in_pool(r)) continue;
    if (world_distance(a, r) < config.negative_radius) continue;
    bool ok = true;
    for (const auto* n : neg) ok = ok && n->id != r.id && world_distance(*n, r) >= config.negative_radius;
    for (const auto* p : pos) ok = ok && p->id != r.id;
    if (ok) star.push_back(&r);
  }
  if (star.empty()) return std::nullopt;

  Quadruplet q;
  q.anchor = anchor;
  for (const auto* p : pos) q.positives.push_back(p->id);
  for (const auto* n : neg) q.negatives.push_back(n->id);
  q.neg_star = star[std::uniform_int_distribution<std::size_t>(0, star.size() - 1)(rng)]->id;
  return q;
}

void LossConfig::validate() const {
  if (!(alpha >= 0.0) || !(beta >= 0.0)) throw std::invalid_argument("loss config: margins must be >= 0");
  if (!(lambda >= 0.0)) throw std::invalid_argument("loss config: lambda must be >= 0");
}

std::vector<std::pair<std::string, std::string>> LossConfig::entries() const {
  using detail::format_bool;
  using detail::format_double;
  return {{"alpha", format_double(alpha)},
          {"beta", format_double(beta)},
          {"lambda", format_double(lambda)},
          {"best_positive", format_bool(best_positive)},
          {"negstar_per_negative", format_bool(negstar_per_negative)}};
}

void LossConfig::set(const std::string& key, const std::string& value) {
  const std::string full = "loss." + key;
  if (key == "alpha") alpha = detail::parse_double(full, value);
  else if (key == "beta") beta = detail::parse_double(full, value);
  else if (key == "lambda") lambda = detail::parse_double(full, value);
  else if (key == "best_positive") best_positive = detail::parse_bool(full, value);
  else if (key == "negstar_per_negative") negstar_per_negative = detail::parse_bool(full, value);
  else throw std::invalid_argument("unknown configuration key '" + full + "'");
}

namespace {

template <typename T>
Tensor<T> repeat_row(const Tensor<T>& row, std::size_t times) {
  const std::vector<std::size_t> zeros(times, 0);
  return gather_rows(row, std::span<const std::size_t>(zeros));
}

template <typename T>
Tensor<T> as_row(const Tensor<T>& x) {
  return x.rank() == 2 ? x : reshape(x, {1, x.size()});
}

template <typename T>
Tensor<T> rows_range(const Tensor<T>& batch, std::size_t begin, std::size_t count) {
  std::vector<std::size_t> idx(count);
  for (std::size_t i = 0; i < count; ++i) idx[i] = begin + i;
  return gather_rows(batch, std::span<const std::size_t>(idx));
}

/// max_i [margin + base − d_i]₊ with `base` a scalar tensor and d: [N].
template <typename T>
Tensor<T> hinge_max(const Tensor<T>& base, const Tensor<T>& d, double margin) {
  const Tensor<T> b = repeat_row(reshape(base, {1}), d.size());
  return reduce(relu(add_scalar(sub(b, d), T(margin))), 0, Reduce::max);
}

}  // namespace

template <typename T>
Tensor<T> sq_distances(const Tensor<T>& row, const Tensor<T>& rows) {
  const Tensor<T> r = as_row(row);
  if (rows.rank() != 2 || r.dim(0) != 1 || r.dim(1) != rows.dim(1)) {
    throw ShapeError("sq_distances: " + shape_string(row.shape()) + " vs " + shape_string(rows.shape()));
  }
  const Tensor<T> diff = sub(rows, repeat_row(r, rows.dim(0)));
  return reduce(mul(diff, diff), 1, Reduce::sum);
}

template <typename T>
Tensor<T> lazy_quadruplet_loss(const Tensor<T>& anchor, const Tensor<T>& positives, const Tensor<T>& negatives,
                               const Tensor<T>& neg_star, const LossConfig& config) {
  if (positives.rank() != 2 || positives.dim(0) == 0) throw std::invalid_argument("lazy_quadruplet_loss: no positives");
  if (negatives.rank() != 2 || negatives.dim(0) == 0) throw std::invalid_argument("lazy_quadruplet_loss: no negatives");
  const Tensor<T> d_pos_all = sq_distances(anchor, positives);
  const Tensor<T> d_pos = config.best_positive
                              ? scale(reduce(scale(d_pos_all, T(-1)), 0, Reduce::max), T(-1))
                              : reduce(d_pos_all, 0, Reduce::mean);
  const Tensor<T> d_neg = sq_distances(anchor, negatives);
  const Tensor<T> d_star = config.negstar_per_negative ? sq_distances(neg_star, negatives)
                                                       : sq_distances(neg_star, as_row(anchor));
  return add(hinge_max(d_pos, d_neg, config.alpha), hinge_max(d_pos, d_star, config.beta));
}

template <typename T>
Tensor<T> lazy_quadruplet_loss(const Tensor<T>& batch, std::size_t positives, std::size_t negatives,
                               const LossConfig& config) {
  if (batch.rank() != 2 || batch.dim(0) != positives + negatives + 2) {
    throw ShapeError("lazy_quadruplet_loss: batch " + shape_string(batch.shape()) + " does not hold 1 + " +
                     std::to_string(positives) + " + " + std::to_string(negatives) + " + 1 rows");
  }
  return lazy_quadruplet_loss(rows_range(batch, 0, 1), rows_range(batch, 1, positives),
                              rows_range(batch, 1 + positives, negatives),
                              rows_range(batch, 1 + positives + negatives, 1), config);
}

template <typename T>
Tensor<T> sse_loss(const Tensor<T>& student, const Tensor<T>& teacher) {
  if (student.shape() != teacher.shape()) {
    throw ShapeError("sse_loss: student " + shape_string(student.shape()) + " vs teacher " +
                     shape_string(teacher.shape()));
  }
  const Tensor<T> diff = sub(teacher, student);
  return sum_all(mul(diff, diff));
}

template <typename T>
Tensor<T> final_loss(const Tensor<T>& lazy, const Tensor<T>& sse, const LossConfig& config) {
  return add(lazy, scale(sse, T(config.lambda)));
}

template <typename T>
Adam<T>::Adam(std::vector<Parameter<T>*> params, const AdamConfig& config)
    : params_(std::move(params)), config_(config), generation_(backward_generation()) {
  for (auto* p : params_) {
    m_.emplace_back(p->size(), 0.0);
    v_.emplace_back(p->size(), 0.0);
  }
}

template <typename T>
void Adam<T>::step() {
  const std::uint64_t now = backward_generation();
  if (now == generation_) throw std::logic_error("optimizer step before backward: no gradients since the last step");
  generation_ = now;
  ++steps_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
  const double b1 = config_.beta1, b2 = config_.beta2, lr = config_.learning_rate, eps = config_.epsilon;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto grad = params_[i]->gradient();
    if (grad.empty()) continue;
    auto values = params_[i]->value().values();
    double* __restrict m = m_[i].data();
    double* __restrict v = v_[i].data();
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double g = grad[j];
      m[j] = b1 * m[j] + (1.0 - b1) * g;
      v[j] = b2 * v[j] + (1.0 - b2) * g * g;
      const double update = lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps);
      values[j] = static_cast<T>(values[j] - update);
    }
  }
}

std::ostream& operator<<(std::ostream& out, const EpochRecord& r) {
  const auto flags = out.flags();
  out << "epoch=" << r.epoch << std::setprecision(9) << " lazy=" << r.lazy << " sse=" << r.sse
      << std::setprecision(4) << " seconds=" << r.seconds << " tuples=" << r.tuples;
  out.flags(flags);
  return out;
}

namespace {

constexpr Split kTrainingPool[] = {Split::database, Split::train};

std::vector<EpochRecord> run_training(EpcModel<float>& model, const Dataset& data, const TrainOptions& options,
                                      const std::vector<std::vector<float>>* teacher) {
  options.loss.validate();
  if (options.batch_tuples == 0) throw std::invalid_argument("train: batch_tuples must be >= 1");
  std::vector<std::uint64_t> anchors;
  for (const auto& r : data.index().records) {
    if (r.split == Split::database || r.split == Split::train) anchors.push_back(r.id);
  }
  const std::size_t per_tuple = options.mining.positives + options.mining.negatives + 2;
  const std::size_t dim = model.config().output_dim;
  Adam<float> adam(model.parameters(), options.adam);
  std::mt19937_64 rng(options.seed);
  std::vector<EpochRecord> trace;
  // The clouds never change during training, so their graphs are built once.
  std::vector<std::optional<AdjacencyMatrix>> graph_cache(data.clouds().size());
  const KnnOptions knn = model.knn_options();

  for (std::size_t epoch = 1; epoch <= options.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::shuffle(anchors.begin(), anchors.end(), rng);
    std::vector<Quadruplet> tuples;
    for (std::uint64_t a : anchors) {
      if (auto q = mine_quadruplet(data.index(), a, options.mining, rng(), kTrainingPool)) tuples.push_back(*q);
    }
    if (tuples.empty()) throw std::runtime_error("train: no mineable tuples in the training splits");

    EpochRecord record;
    record.epoch = epoch;
    std::size_t steps = 0;
    for (std::size_t first = 0; first < tuples.size(); first += options.batch_tuples) {
      const std::size_t count = std::min(options.batch_tuples, tuples.size() - first);
      std::vector<PointCloud> clouds;
      std::vector<AdjacencyMatrix> graphs;
      std::vector<float> targets;
      for (std::size_t t = first; t < first + count; ++t) {
        for (std::uint64_t id : tuples[t].members()) {
          clouds.push_back(data.cloud(id));
          auto& cached = graph_cache[data.position(id)];
          if (!cached) {
            if (clouds.back().size() <= knn.k) {
              throw std::invalid_argument("train: cloud " + std::to_string(id) + " has too few points for k = " +
                                          std::to_string(knn.k));
            }
            cached = build_adjacency(clouds.back(), knn);
          }
          graphs.push_back(*cached);
          if (teacher) {
            const auto& row = (*teacher)[data.position(id)];
            targets.insert(targets.end(), row.begin(), row.end());
          }
        }
      }
      model.zero_grad();
      TapeScope<float> scope;
      const Tensor<float> desc = model.forward(clouds, graphs, BatchNormMode::train);
      Tensor<float> lazy;
      for (std::size_t t = 0; t < count; ++t) {
        std::vector<std::size_t> rows(per_tuple);
        for (std::size_t i = 0; i < per_tuple; ++i) rows[i] = t * per_tuple + i;
        const Tensor<float> l = lazy_quadruplet_loss(gather_rows(desc, std::span<const std::size_t>(rows)),
                                                     options.mining.positives, options.mining.negatives, options.loss);
        lazy = lazy.defined() ? add(lazy, l) : l;
      }
      lazy = scale(lazy, 1.0f / static_cast<float>(count));
      Tensor<float> loss = lazy;
      double sse_value = 0.0;
      if (teacher) {
        const Tensor<float> target({clouds.size(), dim}, targets);
        // Averaged over the clouds of the batch so λ does not scale with tuple size.
        const float per_cloud = 1.0f / static_cast<float>(clouds.size());
        if (options.loss.lambda > 0.0) {
          const Tensor<float> sse = scale(sse_loss(desc, target), per_cloud);
          sse_value = sse.item();
          loss = final_loss(lazy, sse, options.loss);
        } else {
          NoGradScope<float> no_grad;
          sse_value = scale(sse_loss(desc, target), per_cloud).item();
        }
      }
      const double loss_value = loss.item();
      if (!std::isfinite(loss_value)) {
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch));
      }
      scope.tape().backward(loss);
      adam.step();
      record.lazy += lazy.item();
      record.sse += sse_value;
      ++steps;
    }
    record.lazy /= static_cast<double>(steps);
    record.sse /= static_cast<double>(steps);
    record.tuples = tuples.size();
    record.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    trace.push_back(record);
    if (options.log) *options.log << record << '\n' << std::flush;
  }
  return trace;
}

}  // namespace

std::vector<EpochRecord> train_teacher(EpcModel<float>& model, const Dataset& data, const TrainOptions& options) {
  return run_training(model, data, options, nullptr);
}

std::vector<EpochRecord> train_student_distill(EpcModel<float>& student, EpcModel<float>& teacher,
                                               const Dataset& data, const TrainOptions& options) {
  if (student.config().output_dim != teacher.config().output_dim) {
    throw std::invalid_argument("distill: student descriptor dimension " +
                                std::to_string(student.config().output_dim) + " != teacher dimension " +
                                std::to_string(teacher.config().output_dim));
  }
  std::vector<std::vector<float>> targets(data.clouds().size());
  for (std::size_t i = 0; i < data.clouds().size(); ++i) {
    const Split s = data.index().records[i].split;
    if (s == Split::database || s == Split::train) targets[i] = teacher.describe(data.clouds()[i]);
  }
  return run_training(student, data, options, &targets);
}

#define EPC_INSTANTIATE_LOSSES(T)                                                                        \
  template Tensor<T> sq_distances(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> lazy_quadruplet_loss(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,          \
                                          const Tensor<T>&, const LossConfig&);                          \
  template Tensor<T> lazy_quadruplet_loss(const Tensor<T>&, std::size_t, std::size_t, const LossConfig&); \
  template Tensor<T> sse_loss(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> final_loss(const Tensor<T>&, const Tensor<T>&, const LossConfig&);                  \
  template class Adam<T>;

EPC_INSTANTIATE_LOSSES(float)
EPC_INSTANTIATE_LOSSES(double)

}  // namespace epc
