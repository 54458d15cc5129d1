#pragma once

// Tuple mining, the lazy quadruplet and SSE distillation losses, Adam, and
// the teacher / distilled-student training loops.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <vector>

#include "epc/dataset.hpp"
#include "epc/models.hpp"

namespace epc {

struct Quadruplet {
  std::uint64_t anchor = 0;
  std::vector<std::uint64_t> positives;
  std::vector<std::uint64_t> negatives;
  std::uint64_t neg_star = 0;

  /// anchor, positives, negatives, neg_star: the row order of a training batch.
  std::vector<std::uint64_t> members() const;
};

struct MiningConfig {
  double positive_radius = 10.0;
  double negative_radius = 50.0;
  std::size_t positives = 1;
  std::size_t negatives = 4;
};

/// Samples a tuple for `anchor` from records whose split is in `pool`.
/// Returns nullopt (skip the anchor) when there are too few candidates.
std::optional<Quadruplet> mine_quadruplet(const SubmapIndex& index, std::uint64_t anchor, const MiningConfig& config,
                                          std::uint64_t seed,
                                          std::span<const Split> pool = std::span<const Split>());

struct LossConfig {
  double alpha = 0.5;
  double beta = 0.2;
  double lambda = 0.1;
  /// δ_pos from the closest positive; false averages over positives.
  bool best_positive = true;
  /// Second hinge compares each negative with neg_star; false compares the
  /// anchor with neg_star.
  bool negstar_per_negative = true;

  void validate() const;
  std::vector<std::pair<std::string, std::string>> entries() const;
  void set(const std::string& key, const std::string& value);
};

/// Squared Euclidean distances between `row` ([O] or [1, O]) and every row of `rows` ([N, O]) -> [N].
template <typename T>
Tensor<T> sq_distances(const Tensor<T>& row, const Tensor<T>& rows);

/// max_j [α + δ_pos − δ_neg_j]₊ + max_k [β + δ_pos − δ*_k]₊.
/// anchor, neg_star: [O]; positives: [P, O]; negatives: [N, O].
template <typename T>
Tensor<T> lazy_quadruplet_loss(const Tensor<T>& anchor, const Tensor<T>& positives, const Tensor<T>& negatives,
                               const Tensor<T>& neg_star, const LossConfig& config);

/// Same, on batch rows ordered as Quadruplet::members(): [1 + P + N + 1, O].
template <typename T>
Tensor<T> lazy_quadruplet_loss(const Tensor<T>& batch, std::size_t positives, std::size_t negatives,
                               const LossConfig& config);

/// ‖teacher − student‖² summed over every element.
template <typename T>
Tensor<T> sse_loss(const Tensor<T>& student, const Tensor<T>& teacher);

/// lazy + λ·sse.
template <typename T>
Tensor<T> final_loss(const Tensor<T>& lazy, const Tensor<T>& sse, const LossConfig& config);

struct AdamConfig {
  double learning_rate = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename T>
class Adam {
 public:
  Adam(std::vector<Parameter<T>*> params, const AdamConfig& config);

  /// Applies one bias-corrected update. Throws std::logic_error if no
  /// backward pass ran since the previous step (or since construction).
  void step();
  std::size_t steps() const { return steps_; }

 private:
  std::vector<Parameter<T>*> params_;
  AdamConfig config_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::size_t steps_ = 0;
  std::uint64_t generation_;
};

/// A non-finite loss during training.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainOptions {
  std::size_t epochs = 1;
  std::uint64_t seed = 0;
  /// Tuples per optimizer step; they share one forward pass.
  std::size_t batch_tuples = 1;
  MiningConfig mining;
  LossConfig loss;
  AdamConfig adam;
  /// One line per epoch when set.
  std::ostream* log = nullptr;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double lazy = 0.0;
  double sse = 0.0;
  double seconds = 0.0;
  std::size_t tuples = 0;
};

std::ostream& operator<<(std::ostream& out, const EpochRecord& record);

/// Trains with the lazy quadruplet loss on the database and train splits.
std::vector<EpochRecord> train_teacher(EpcModel<float>& model, const Dataset& data, const TrainOptions& options);

/// Trains `student` with lazy + λ·SSE against the frozen teacher's
/// inference-mode descriptors. The teacher is never modified.
std::vector<EpochRecord> train_student_distill(EpcModel<float>& student, EpcModel<float>& teacher,
                                               const Dataset& data, const TrainOptions& options);

}  // namespace epc
