#include "patchforge/optimizer.hpp"

#include <algorithm>
#include <cmath>

#include "patchforge/errors.hpp"

namespace patchforge {

double AdamW::current_rate() const {
  if (config_.warmup_steps <= 0 || step_ >= config_.warmup_steps) return config_.learning_rate;
  return config_.learning_rate * static_cast<double>(std::max<std::int64_t>(step_, 1)) /
         static_cast<double>(config_.warmup_steps);
}

void AdamW::step(std::span<const ParamSlot> params, const GradStore& grads) {
  for (const ParamSlot& p : params) {
    const Matrix& g = grads.grad(p.id);
    if (!g.same_shape(*p.value)) {
      throw ShapeError("optimizer: gradient " + g.shape() + " for parameter " + p.name + " " + p.value->shape());
    }
    if (!all_finite(g.data())) throw NumericError("optimizer: non-finite gradient for parameter " + p.name);
  }
  ++step_;
  const double lr = current_rate();
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
  for (const ParamSlot& p : params) {
    auto [it, fresh] = moments_.try_emplace(p.id);
    if (fresh) {
      it->second.first = Matrix(p.value->rows(), p.value->cols());
      it->second.second = Matrix(p.value->rows(), p.value->cols());
    }
    auto m = it->second.first.data();
    auto v = it->second.second.data();
    auto w = p.value->data();
    auto g = grads.grad(p.id).data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      w[i] -= lr * config_.weight_decay * w[i];
      w[i] -= lr * mhat / (std::sqrt(vhat) + config_.epsilon);
    }
  }
}

GradCheckResult grad_check(const LossFn& loss, std::span<const ParamSlot> params, double epsilon) {
  if (!(epsilon >= 1e-7 && epsilon <= 1e-4)) throw ValidationError("grad_check: epsilon must lie in [1e-7, 1e-4]");
  GradStore grads;
  for (const ParamSlot& p : params) grads.register_param(p.id, p.value->rows(), p.value->cols());
  loss(&grads);

  GradCheckResult result;
  for (const ParamSlot& p : params) {
    auto w = p.value->data();
    const Matrix& analytic = grads.grad(p.id);
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double saved = w[i];
      w[i] = saved + epsilon;
      const double up = loss(nullptr);
      w[i] = saved - epsilon;
      const double down = loss(nullptr);
      w[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw NumericError("grad_check: non-finite loss probing " + p.name + "[" + std::to_string(i) + "]");
      }
      const double numeric = (up - down) / (2.0 * epsilon);
      const double a = analytic.data()[i];
      const double err = std::abs(a - numeric) / std::max(1e-12, std::abs(a) + std::abs(numeric));
      ++result.coordinates;
      if (err > result.max_relative_error) {
        result.max_relative_error = err;
        result.worst_param = p.id;
        result.worst_index = i;
      }
    }
  }
  return result;
}

}  // namespace patchforge
