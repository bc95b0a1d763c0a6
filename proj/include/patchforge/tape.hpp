#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <span>
#include <vector>

#include "patchforge/matrix.hpp"

namespace patchforge {

using ParamId = std::size_t;

/// Gradient accumulators for the parameters that are currently trainable.
/// A parameter that was never registered is frozen: the tape treats it as a
/// constant and no gradient buffer exists for it.
class GradStore {
 public:
  void register_param(ParamId id, std::size_t rows, std::size_t cols);
  bool contains(ParamId id) const { return grads_.count(id) != 0; }
  Matrix& grad(ParamId id);
  const Matrix& grad(ParamId id) const;
  void zero();
  std::vector<ParamId> ids() const;
  std::size_t size() const { return grads_.size(); }

 private:
  std::map<ParamId, Matrix> grads_;
};

/// Handle to a value recorded on a Tape.
struct Var {
  std::size_t index = 0;
};

/// Records matrix operations and replays them backwards.
///
/// Nodes are appended in evaluation order; backward() visits them in exact
/// reverse order. Nodes whose inputs are all constant carry no backward
/// closure, so a Tape without a GradStore is a plain forward evaluator.
class Tape {
 public:
  explicit Tape(GradStore* grads = nullptr) : grads_(grads) {}

  Var constant(Matrix value);
  /// Constant that refers to `value` without copying; it must outlive the tape.
  Var constant_ref(const Matrix& value);
  /// Trainable leaf when `id` is registered in the GradStore, constant
  /// otherwise. Holds a reference to `value`, which must outlive the tape.
  Var parameter(ParamId id, const Matrix& value);

  const Matrix& value(Var v) const {
    const Node& n = nodes_[v.index];
    return n.ref != nullptr ? *n.ref : n.value;
  }
  double scalar(Var v) const { return value(v)(0, 0); }
  bool requires_grad(Var v) const { return nodes_[v.index].needs_grad; }
  std::size_t node_count() const { return nodes_.size(); }

  Var matmul(Var a, Var b);
  /// a * b^T
  Var matmul_nt(Var a, Var b);
  Var add(Var a, Var b);
  /// Adds a 1 x n row to every row of a.
  Var add_row(Var a, Var row);
  /// Adds a 1 x 1 scalar to every entry of a.
  Var add_scalar(Var a, Var s);
  Var scale(Var a, double factor);
  /// Row vector times a 1 x 1 scalar.
  Var scale_by(Var row, Var s);
  Var gelu(Var a);
  Var square(Var a);
  /// max(0, margin - a)^2 elementwise.
  Var squared_hinge(Var a, double margin);
  Var layer_norm(Var x, Var gain, Var bias, double eps);
  Var softmax_rows(Var a);
  Var take_rows(Var table, std::span<const int> ids);
  Var slice_rows(Var a, std::size_t begin, std::size_t count);
  Var slice_cols(Var a, std::size_t begin, std::size_t count);
  Var concat_cols(std::span<const Var> parts);
  /// Column vector of per-segment maxima of a column vector; `offsets` has
  /// one more entry than there are segments.
  Var segment_max(Var column, std::span<const std::size_t> offsets);
  /// Sum of all entries, as 1 x 1.
  Var sum(Var a);
  /// Mean of all entries, as 1 x 1.
  Var mean(Var a);
  /// Weighted sum of 1 x 1 scalars.
  Var weighted_sum(std::span<const Var> terms, std::span<const double> weights);
  /// Cross-entropy of a 1 x C logit row against `label`, with optional label smoothing.
  Var cross_entropy(Var logits, std::size_t label, double smoothing = 0.0);

  /// Seeds d(loss)/d(loss) = 1 and accumulates gradients into the GradStore.
  void backward(Var loss);

 private:
  struct Node {
    Matrix value;
    const Matrix* ref = nullptr;
    Matrix grad;
    bool needs_grad = false;
    bool is_param = false;
    ParamId param = 0;
    std::function<void(Tape&, std::size_t)> back;
  };

  Var push(Matrix value, bool needs_grad, std::function<void(Tape&, std::size_t)> back);
  Matrix& grad_of(std::size_t index);
  Node& node(Var v) { return nodes_[v.index]; }

  GradStore* grads_ = nullptr;
  std::vector<Node> nodes_;
};

}  // namespace patchforge
