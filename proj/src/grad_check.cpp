#include "epc/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

namespace epc {

namespace {

struct Evaluation {
  double value = 0.0;
  std::uint64_t signature = 0;
};

Evaluation evaluate(const std::function<Tensor<double>()>& f) {
  NoGradScope<double> no_grad;
  BranchSignature::reset();
  const Tensor<double> out = f();
  if (!out.defined() || out.size() != 1) {
    throw ShapeError("finite_difference_check: function must return a scalar");
  }
  return {out.item(), BranchSignature::value()};
}

bool same_bits(double a, double b) { return std::memcmp(&a, &b, sizeof(double)) == 0; }

class SignatureGuard {
 public:
  SignatureGuard() : previous_(BranchSignature::enabled()) { BranchSignature::enable(true); }
  ~SignatureGuard() { BranchSignature::enable(previous_); }

 private:
  bool previous_;
};

}  // namespace

GradCheckResult finite_difference_check(const std::function<Tensor<double>()>& f, Tensor<double>& leaf,
                                        const GradCheckOptions& options) {
  if (!(options.step > 0.0)) throw std::invalid_argument("finite_difference_check: step must be positive");
  SignatureGuard guard;

  const Evaluation first = evaluate(f);
  const Evaluation second = evaluate(f);
  if (!same_bits(first.value, second.value) || first.signature != second.signature) {
    throw NondeterminismError("finite_difference_check: two evaluations at the same point differ (" +
                              std::to_string(first.value) + " vs " + std::to_string(second.value) + ")");
  }

  const bool had_grad = leaf.requires_grad();
  leaf.set_requires_grad(true);
  leaf.zero_grad();
  std::vector<double> analytic(leaf.size(), 0.0);
  {
    TapeScope<double> scope;
    const Tensor<double> loss = f();
    if (loss.requires_grad()) {
      scope.tape().backward(loss);
      const auto g = leaf.grad();
      if (!g.empty()) std::copy(g.begin(), g.end(), analytic.begin());
    }
  }
  leaf.set_requires_grad(had_grad);

  GradCheckResult result;
  auto values = leaf.values();
  const std::size_t n = values.size();
  const std::size_t stride =
      options.max_coordinates == 0 || n <= options.max_coordinates ? 1 : (n + options.max_coordinates - 1) / options.max_coordinates;
  for (std::size_t i = 0; i < n; i += stride) {
    const double original = values[i];
    double h = options.step;
    double numeric = 0.0;
    for (int attempt = 0;; ++attempt) {
      values[i] = original + h;
      const Evaluation plus = evaluate(f);
      values[i] = original - h;
      const Evaluation minus = evaluate(f);
      values[i] = original;
      numeric = (plus.value - minus.value) / (2.0 * h);
      const bool smooth = plus.signature == first.signature && minus.signature == first.signature;
      if (smooth || attempt >= options.max_step_reductions) break;
      h /= 10.0;
      ++result.step_reductions;
    }
    const double a = analytic[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    const double rel = std::abs(a - numeric) / denom;
    if (rel > result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst_index = i;
    }
    ++result.coordinates;
  }
  return result;
}

GradCheckResult finite_difference_check(const std::function<Tensor<double>()>& f, Parameter<double>& p,
                                        double step) {
  GradCheckOptions options;
  options.step = step;
  return finite_difference_check(f, p.value(), options);
}

}  // namespace epc
