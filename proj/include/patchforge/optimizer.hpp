#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>

#include "patchforge/matrix.hpp"
#include "patchforge/tape.hpp"

namespace patchforge {

struct AdamWConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;
  // The rate ramps linearly from lr/warmup to lr over this many steps.
  std::int64_t warmup_steps = 0;
};

struct ParamSlot {
  ParamId id;
  Matrix* value;
  std::string name;
};

/// Adam with decoupled weight decay and bias-corrected moments.
class AdamW {
 public:
  explicit AdamW(AdamWConfig config) : config_(config) {}

  /// Applies one update to every slot using the gradients in `grads`.
  /// Throws NumericError naming the parameter if a gradient is not finite.
  void step(std::span<const ParamSlot> params, const GradStore& grads);

  std::int64_t steps() const { return step_; }
  double current_rate() const;
  const AdamWConfig& config() const { return config_; }

 private:
  struct Moments {
    Matrix first;
    Matrix second;
  };

  AdamWConfig config_;
  std::int64_t step_ = 0;
  std::map<ParamId, Moments> moments_;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  ParamId worst_param = 0;
  std::size_t worst_index = 0;
  std::size_t coordinates = 0;
};

/// Evaluates the loss at the current parameter values; when `grads` is
/// non-null the callee also accumulates analytic gradients into it.
using LossFn = std::function<double(GradStore* grads)>;

/// Compares tape gradients against central differences coordinate by
/// coordinate. Relative error is |a - n| / max(1e-12, |a| + |n|).
GradCheckResult grad_check(const LossFn& loss, std::span<const ParamSlot> params, double epsilon);

}  // namespace patchforge
