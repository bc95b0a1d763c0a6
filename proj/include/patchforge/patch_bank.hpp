#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "patchforge/matrix.hpp"

namespace patchforge {

/// One appended key/value neuron in the editable FFN.
struct Patch {
  Vector key;          // k_p, d_model entries
  double bias = 0.0;   // b_p
  Vector value;        // v_p, d_model entries
  std::uint64_t id = 0;
  std::uint64_t origin_example_id = 0;
  bool frozen = false;

  bool operator==(const Patch&) const = default;
};

/// Ordered patches attached to one layer. At most one patch is unfrozen at a
/// time, and it is always the most recently added one.
class PatchBank {
 public:
  PatchBank() = default;
  explicit PatchBank(std::size_t layer_index) : layer_index_(layer_index) {}

  std::size_t layer_index() const { return layer_index_; }
  std::size_t size() const { return patches_.size(); }
  bool empty() const { return patches_.empty(); }
  const std::vector<Patch>& patches() const { return patches_; }
  const Patch& operator[](std::size_t i) const { return patches_[i]; }

  bool has_unfrozen() const { return !patches_.empty() && !patches_.back().frozen; }
  /// Throws SequencingError if an unfrozen patch exists or the id is taken.
  void add(Patch patch);
  Patch& unfrozen();
  void freeze();
  std::uint64_t next_id() const { return next_id_; }

  bool operator==(const PatchBank&) const = default;

 private:
  std::size_t layer_index_ = 0;
  std::vector<Patch> patches_;
  std::uint64_t next_id_ = 0;
};

/// sigma(q K + b_k) V + b_v for a single row q.
Vector ffn_forward(std::span<const double> q, const Matrix& keys, std::span<const double> key_bias,
                   const Matrix& values, std::span<const double> value_bias);

/// ffn_forward(q) plus the sum over patches of sigma(q k_p + b_p) v_p.
Vector patched_ffn_forward(std::span<const double> q, const Matrix& keys, std::span<const double> key_bias,
                           const Matrix& values, std::span<const double> value_bias, const PatchBank& bank);

/// sigma(q k_p + b_p).
double patch_activation(std::span<const double> q, const Patch& patch);

/// Sum over patches of sigma(q k_p + b_p) v_p, added into `out`.
void add_patch_contributions(std::span<const double> q, const PatchBank& bank, std::span<double> out);

/// Largest activation of `patch` across the rows of `positions`.
double max_patch_activation(const Matrix& positions, const Patch& patch);

}  // namespace patchforge
