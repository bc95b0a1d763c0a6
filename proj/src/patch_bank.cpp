#include "patchforge/patch_bank.hpp"

#include <algorithm>
#include <string>

#include "patchforge/errors.hpp"

namespace patchforge {

void PatchBank::add(Patch patch) {
  if (has_unfrozen()) throw SequencingError("patch bank already holds an unfrozen patch");
  for (const Patch& p : patches_) {
    if (p.id == patch.id) throw SequencingError("duplicate patch id " + std::to_string(patch.id));
  }
  next_id_ = std::max(next_id_, patch.id + 1);
  patches_.push_back(std::move(patch));
}

Patch& PatchBank::unfrozen() {
  if (!has_unfrozen()) throw SequencingError("patch bank has no unfrozen patch");
  return patches_.back();
}

void PatchBank::freeze() { unfrozen().frozen = true; }

Vector ffn_forward(std::span<const double> q, const Matrix& keys, std::span<const double> key_bias,
                   const Matrix& values, std::span<const double> value_bias) {
  if (keys.cols() != values.rows() || value_bias.size() != values.cols()) {
    throw ShapeError("ffn: keys " + keys.shape() + " do not chain with values " + values.shape());
  }
  Vector hidden = affine(q, keys, key_bias);
  for (double& h : hidden) h = gelu(h);
  return affine(hidden, values, value_bias);
}

double patch_activation(std::span<const double> q, const Patch& patch) {
  if (q.size() != patch.key.size()) {
    throw ShapeError("patch activation: q has " + std::to_string(q.size()) + " entries, key has " +
                     std::to_string(patch.key.size()));
  }
  return gelu(dot(q, patch.key) + patch.bias);
}

void add_patch_contributions(std::span<const double> q, const PatchBank& bank, std::span<double> out) {
  for (const Patch& p : bank.patches()) {
    if (p.value.size() != out.size()) throw ShapeError("patch value width does not match FFN output");
    axpy(patch_activation(q, p), p.value, out);
  }
}

Vector patched_ffn_forward(std::span<const double> q, const Matrix& keys, std::span<const double> key_bias,
                           const Matrix& values, std::span<const double> value_bias, const PatchBank& bank) {
  Vector out = ffn_forward(q, keys, key_bias, values, value_bias);
  add_patch_contributions(q, bank, out);
  return out;
}

double max_patch_activation(const Matrix& positions, const Patch& patch) {
  double best = -1.0;
  for (std::size_t r = 0; r < positions.rows(); ++r) best = std::max(best, patch_activation(positions.row(r), patch));
  return best;
}

}  // namespace patchforge
