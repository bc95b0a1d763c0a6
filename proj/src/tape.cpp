#include "patchforge/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "patchforge/errors.hpp"

namespace patchforge {

void GradStore::register_param(ParamId id, std::size_t rows, std::size_t cols) {
  grads_.insert_or_assign(id, Matrix(rows, cols));
}

Matrix& GradStore::grad(ParamId id) {
  auto it = grads_.find(id);
  if (it == grads_.end()) throw ValidationError("no gradient registered for parameter " + std::to_string(id));
  return it->second;
}

const Matrix& GradStore::grad(ParamId id) const {
  auto it = grads_.find(id);
  if (it == grads_.end()) throw ValidationError("no gradient registered for parameter " + std::to_string(id));
  return it->second;
}

void GradStore::zero() {
  for (auto& [id, g] : grads_) g.fill(0.0);
}

std::vector<ParamId> GradStore::ids() const {
  std::vector<ParamId> out;
  out.reserve(grads_.size());
  for (const auto& [id, g] : grads_) out.push_back(id);
  return out;
}

Var Tape::push(Matrix value, bool needs_grad, std::function<void(Tape&, std::size_t)> back) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  if (needs_grad) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Matrix& Tape::grad_of(std::size_t index) {
  Node& n = nodes_[index];
  if (n.grad.empty()) {
    const Matrix& v = value(Var{index});
    n.grad = Matrix(v.rows(), v.cols());
  }
  return n.grad;
}

Var Tape::constant(Matrix value) { return push(std::move(value), false, nullptr); }

Var Tape::constant_ref(const Matrix& value) {
  Var v = push(Matrix(), false, nullptr);
  nodes_[v.index].ref = &value;
  return v;
}

Var Tape::parameter(ParamId id, const Matrix& value) {
  const bool trainable = grads_ != nullptr && grads_->contains(id);
  Var v = constant_ref(value);
  if (trainable) {
    nodes_[v.index].needs_grad = true;
    nodes_[v.index].is_param = true;
    nodes_[v.index].param = id;
  }
  return v;
}

Var Tape::matmul(Var a, Var b) {
  const bool ng = requires_grad(a) || requires_grad(b);
  return push(patchforge::matmul(value(a), value(b)), ng, [a, b](Tape& t, std::size_t self) {
    const Matrix& g = t.nodes_[self].grad;
    if (t.requires_grad(a)) add_inplace(t.grad_of(a.index), patchforge::matmul_nt(g, t.value(b)));
    if (t.requires_grad(b)) add_inplace(t.grad_of(b.index), matmul_tn(t.value(a), g));
  });
}

Var Tape::matmul_nt(Var a, Var b) {
  const bool ng = requires_grad(a) || requires_grad(b);
  return push(patchforge::matmul_nt(value(a), value(b)), ng, [a, b](Tape& t, std::size_t self) {
    const Matrix& g = t.nodes_[self].grad;
    if (t.requires_grad(a)) add_inplace(t.grad_of(a.index), patchforge::matmul(g, t.value(b)));
    if (t.requires_grad(b)) add_inplace(t.grad_of(b.index), matmul_tn(g, t.value(a)));
  });
}

Var Tape::add(Var a, Var b) {
  if (!value(a).same_shape(value(b))) throw ShapeError("add: " + value(a).shape() + " plus " + value(b).shape());
  Matrix out = value(a);
  add_inplace(out, value(b));
  const bool ng = requires_grad(a) || requires_grad(b);
  return push(std::move(out), ng, [a, b](Tape& t, std::size_t self) {
    const Matrix& g = t.nodes_[self].grad;
    if (t.requires_grad(a)) add_inplace(t.grad_of(a.index), g);
    if (t.requires_grad(b)) add_inplace(t.grad_of(b.index), g);
  });
}

Var Tape::add_row(Var a, Var row) {
  if (value(row).rows() != 1) throw ShapeError("add_row: bias must be a row, got " + value(row).shape());
  Matrix out = value(a);
  add_row_inplace(out, value(row).data());
  const bool ng = requires_grad(a) || requires_grad(row);
  return push(std::move(out), ng, [a, row](Tape& t, std::size_t self) {
    const Matrix& g = t.nodes_[self].grad;
    if (t.requires_grad(a)) add_inplace(t.grad_of(a.index), g);
    if (t.requires_grad(row)) {
      auto gr = t.grad_of(row.index).row(0);
      for (std::size_t r = 0; r < g.rows(); ++r) axpy(1.0, g.row(r), gr);
    }
  });
}

Var Tape::add_scalar(Var a, Var s) {
  if (value(s).size() != 1) throw ShapeError("add_scalar: expected 1x1, got " + value(s).shape());
  Matrix out = value(a);
  const double sv = value(s)(0, 0);
  for (double& v : out.data()) v += sv;
  const bool ng = requires_grad(a) || requires_grad(s);
  return push(std::move(out), ng, [a, s](Tape& t, std::size_t self) {
    const Matrix& g = t.nodes_[self].grad;
    if (t.requires_grad(a)) add_inplace(t.grad_of(a.index), g);
    if (t.requires_grad(s)) {
      double total = 0.0;
      for (double v : g.data()) total += v;
      t.grad_of(s.index)(0, 0) += total;
    }
  });
}

Var Tape::scale(Var a, double factor) {
  Matrix out = value(a);
  for (double& v : out.data()) v *= factor;
  return push(std::move(out), requires_grad(a), [a, factor](Tape& t, std::size_t self) {
    axpy(factor, t.nodes_[self].grad.data(), t.grad_of(a.index).data());
  });
}

Var Tape::scale_by(Var row, Var s) {
  if (value(s).size() != 1) throw ShapeError("scale_by: expected 1x1, got " + value(s).shape());
  Matrix out = value(row);
  const double sv = value(s)(0, 0);
  for (double& v : out.data()) v *= sv;
  const bool ng = requires_grad(row) || requires_grad(s);
  return push(std::move(out), ng, [row, s](Tape& t, std::size_t self) {
    const Matrix& g = t.nodes_[self].grad;
    if (t.requires_grad(row)) axpy(t.value(s)(0, 0), g.data(), t.grad_of(row.index).data());
    if (t.requires_grad(s)) t.grad_of(s.index)(0, 0) += dot(g.data(), t.value(row).data());
  });
}

Var Tape::gelu(Var a) {
  return push(patchforge::gelu(value(a)), requires_grad(a), [a](Tape& t, std::size_t self) {
    const Matrix& g = t.nodes_[self].grad;
    auto in = t.value(a).data();
    auto out = t.grad_of(a.index).data();
    for (std::size_t i = 0; i < in.size(); ++i) out[i] += g.data()[i] * gelu_derivative(in[i]);
  });
}

Var Tape::square(Var a) {
  Matrix out = value(a);
  for (double& v : out.data()) v *= v;
  return push(std::move(out), requires_grad(a), [a](Tape& t, std::size_t self) {
    const Matrix& g = t.nodes_[self].grad;
    auto in = t.value(a).data();
    auto out = t.grad_of(a.index).data();
    for (std::size_t i = 0; i < in.size(); ++i) out[i] += 2.0 * in[i] * g.data()[i];
  });
}

Var Tape::squared_hinge(Var a, double margin) {
  Matrix out = value(a);
  for (double& v : out.data()) {
    const double gap = std::max(0.0, margin - v);
    v = gap * gap;
  }
  return push(std::move(out), requires_grad(a), [a, margin](Tape& t, std::size_t self) {
    const Matrix& g = t.nodes_[self].grad;
    auto in = t.value(a).data();
    auto out = t.grad_of(a.index).data();
    for (std::size_t i = 0; i < in.size(); ++i) {
      out[i] += -2.0 * std::max(0.0, margin - in[i]) * g.data()[i];
    }
  });
}

Var Tape::layer_norm(Var x, Var gain, Var bias, double eps) {
  const Matrix& in = value(x);
  const std::size_t rows = in.rows();
  const std::size_t cols = in.cols();
  if (value(gain).size() != cols || value(bias).size() != cols) {
    throw ShapeError("layer_norm: input " + in.shape() + " with gain " + value(gain).shape());
  }
  Matrix xhat(rows, cols);
  std::vector<double> inv(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = in.row(r);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(cols);
    inv[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) xhat(r, c) = (row[c] - mean) * inv[r];
  }
  Matrix out(rows, cols);
  auto g = value(gain).data();
  auto b = value(bias).data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out(r, c) = xhat(r, c) * g[c] + b[c];
  }
  const bool ng = requires_grad(x) || requires_grad(gain) || requires_grad(bias);
  return push(std::move(out), ng,
              [x, gain, bias, xhat = std::move(xhat), inv = std::move(inv)](Tape& t, std::size_t self) {
                const Matrix& dy = t.nodes_[self].grad;
                const std::size_t rows = dy.rows();
                const std::size_t cols = dy.cols();
                if (t.requires_grad(gain)) {
                  auto dg = t.grad_of(gain.index).data();
                  for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < cols; ++c) dg[c] += dy(r, c) * xhat(r, c);
                }
                if (t.requires_grad(bias)) {
                  auto db = t.grad_of(bias.index).data();
                  for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < cols; ++c) db[c] += dy(r, c);
                }
                if (t.requires_grad(x)) {
                  auto g = t.value(gain).data();
                  Matrix& dx = t.grad_of(x.index);
                  std::vector<double> dxhat(cols);
                  for (std::size_t r = 0; r < rows; ++r) {
                    double mean_d = 0.0;
                    double mean_dx = 0.0;
                    for (std::size_t c = 0; c < cols; ++c) {
                      dxhat[c] = dy(r, c) * g[c];
                      mean_d += dxhat[c];
                      mean_dx += dxhat[c] * xhat(r, c);
                    }
                    mean_d /= static_cast<double>(cols);
                    mean_dx /= static_cast<double>(cols);
                    for (std::size_t c = 0; c < cols; ++c) {
                      dx(r, c) += inv[r] * (dxhat[c] - mean_d - xhat(r, c) * mean_dx);
                    }
                  }
                }
              });
}

Var Tape::softmax_rows(Var a) {
  Matrix out = value(a);
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double total = 0.0;
    for (double& v : row) {
      v = std::exp(v - mx);
      total += v;
    }
    for (double& v : row) v /= total;
  }
  return push(std::move(out), requires_grad(a), [a](Tape& t, std::size_t self) {
    const Matrix& y = t.value(Var{self});
    const Matrix& dy = t.nodes_[self].grad;
    Matrix& dx = t.grad_of(a.index);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      const double inner = dot(y.row(r), dy.row(r));
      for (std::size_t c = 0; c < y.cols(); ++c) dx(r, c) += y(r, c) * (dy(r, c) - inner);
    }
  });
}

Var Tape::take_rows(Var table, std::span<const int> ids) {
  const Matrix& tab = value(table);
  Matrix out(ids.size(), tab.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= tab.rows()) {
      throw ShapeError("take_rows: id " + std::to_string(ids[i]) + " outside table " + tab.shape());
    }
    auto src = tab.row(static_cast<std::size_t>(ids[i]));
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  std::vector<int> idv(ids.begin(), ids.end());
  return push(std::move(out), requires_grad(table), [table, idv = std::move(idv)](Tape& t, std::size_t self) {
    const Matrix& g = t.nodes_[self].grad;
    Matrix& dt = t.grad_of(table.index);
    for (std::size_t i = 0; i < idv.size(); ++i) axpy(1.0, g.row(i), dt.row(static_cast<std::size_t>(idv[i])));
  });
}

Var Tape::slice_rows(Var a, std::size_t begin, std::size_t count) {
  const Matrix& in = value(a);
  if (begin + count > in.rows()) throw ShapeError("slice_rows past end of " + in.shape());
  Matrix out(count, in.cols());
  for (std::size_t r = 0; r < count; ++r) {
    auto src = in.row(begin + r);
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return push(std::move(out), requires_grad(a), [a, begin](Tape& t, std::size_t self) {
    const Matrix& g = t.nodes_[self].grad;
    Matrix& d = t.grad_of(a.index);
    for (std::size_t r = 0; r < g.rows(); ++r) axpy(1.0, g.row(r), d.row(begin + r));
  });
}

Var Tape::slice_cols(Var a, std::size_t begin, std::size_t count) {
  const Matrix& in = value(a);
  if (begin + count > in.cols()) throw ShapeError("slice_cols past end of " + in.shape());
  Matrix out(in.rows(), count);
  for (std::size_t r = 0; r < in.rows(); ++r)
    for (std::size_t c = 0; c < count; ++c) out(r, c) = in(r, begin + c);
  return push(std::move(out), requires_grad(a), [a, begin](Tape& t, std::size_t self) {
    const Matrix& g = t.nodes_[self].grad;
    Matrix& d = t.grad_of(a.index);
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < g.cols(); ++c) d(r, begin + c) += g(r, c);
  });
}

Var Tape::concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t rows = value(parts[0]).rows();
  std::size_t cols = 0;
  bool ng = false;
  for (Var p : parts) {
    if (value(p).rows() != rows) throw ShapeError("concat_cols: row mismatch at " + value(p).shape());
    cols += value(p).cols();
    ng = ng || requires_grad(p);
  }
  Matrix out(rows, cols);
  std::size_t offset = 0;
  for (Var p : parts) {
    const Matrix& m = value(p);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < m.cols(); ++c) out(r, offset + c) = m(r, c);
    offset += m.cols();
  }
  std::vector<Var> pv(parts.begin(), parts.end());
  return push(std::move(out), ng, [pv = std::move(pv)](Tape& t, std::size_t self) {
    const Matrix& g = t.nodes_[self].grad;
    std::size_t offset = 0;
    for (Var p : pv) {
      const std::size_t pc = t.value(p).cols();
      if (t.requires_grad(p)) {
        Matrix& d = t.grad_of(p.index);
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < pc; ++c) d(r, c) += g(r, offset + c);
      }
      offset += pc;
    }
  });
}

Var Tape::segment_max(Var column, std::span<const std::size_t> offsets) {
  const Matrix& in = value(column);
  if (in.cols() != 1) throw ShapeError("segment_max: expected a column vector, got " + in.shape());
  if (offsets.size() < 2 || offsets.back() != in.rows()) throw ShapeError("segment_max: offsets do not cover input");
  const std::size_t segments = offsets.size() - 1;
  Matrix out(segments, 1);
  std::vector<std::size_t> arg(segments);
  for (std::size_t s = 0; s < segments; ++s) {
    if (offsets[s + 1] <= offsets[s]) throw ShapeError("segment_max: empty segment");
    std::size_t best = offsets[s];
    for (std::size_t i = offsets[s] + 1; i < offsets[s + 1]; ++i) {
      if (in(i, 0) > in(best, 0)) best = i;
    }
    arg[s] = best;
    out(s, 0) = in(best, 0);
  }
  return push(std::move(out), requires_grad(column), [column, arg = std::move(arg)](Tape& t, std::size_t self) {
    const Matrix& g = t.nodes_[self].grad;
    Matrix& d = t.grad_of(column.index);
    for (std::size_t s = 0; s < arg.size(); ++s) d(arg[s], 0) += g(s, 0);
  });
}

Var Tape::sum(Var a) {
  double total = 0.0;
  for (double v : value(a).data()) total += v;
  return push(Matrix(1, 1, total), requires_grad(a), [a](Tape& t, std::size_t self) {
    const double g = t.nodes_[self].grad(0, 0);
    for (double& v : t.grad_of(a.index).data()) v += g;
  });
}

Var Tape::mean(Var a) {
  const double n = static_cast<double>(value(a).size());
  double total = 0.0;
  for (double v : value(a).data()) total += v;
  return push(Matrix(1, 1, total / n), requires_grad(a), [a, n](Tape& t, std::size_t self) {
    const double g = t.nodes_[self].grad(0, 0) / n;
    for (double& v : t.grad_of(a.index).data()) v += g;
  });
}

Var Tape::weighted_sum(std::span<const Var> terms, std::span<const double> weights) {
  if (terms.size() != weights.size()) throw ShapeError("weighted_sum: term/weight count mismatch");
  double total = 0.0;
  bool ng = false;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (value(terms[i]).size() != 1) throw ShapeError("weighted_sum: terms must be 1x1");
    total += weights[i] * scalar(terms[i]);
    ng = ng || requires_grad(terms[i]);
  }
  std::vector<Var> tv(terms.begin(), terms.end());
  std::vector<double> wv(weights.begin(), weights.end());
  return push(Matrix(1, 1, total), ng, [tv = std::move(tv), wv = std::move(wv)](Tape& t, std::size_t self) {
    const double g = t.nodes_[self].grad(0, 0);
    for (std::size_t i = 0; i < tv.size(); ++i) {
      if (t.requires_grad(tv[i])) t.grad_of(tv[i].index)(0, 0) += wv[i] * g;
    }
  });
}

Var Tape::cross_entropy(Var logits, std::size_t label, double smoothing) {
  const Matrix& z = value(logits);
  if (z.rows() != 1 || label >= z.cols()) {
    throw ShapeError("cross_entropy: logits " + z.shape() + " with label " + std::to_string(label));
  }
  const std::size_t n = z.cols();
  const double mx = *std::max_element(z.data().begin(), z.data().end());
  double total = 0.0;
  for (double v : z.data()) total += std::exp(v - mx);
  const double lse = mx + std::log(total);
  std::vector<double> target(n, smoothing / static_cast<double>(n));
  target[label] += 1.0 - smoothing;
  double loss = 0.0;
  std::vector<double> probs(n);
  for (std::size_t c = 0; c < n; ++c) {
    probs[c] = std::exp(z(0, c) - lse);
    loss -= target[c] * (z(0, c) - lse);
  }
  return push(Matrix(1, 1, loss), requires_grad(logits),
              [logits, probs = std::move(probs), target = std::move(target)](Tape& t, std::size_t self) {
                const double g = t.nodes_[self].grad(0, 0);
                auto d = t.grad_of(logits.index).data();
                for (std::size_t c = 0; c < probs.size(); ++c) d[c] += g * (probs[c] - target[c]);
              });
}

void Tape::backward(Var loss) {
  if (value(loss).size() != 1) throw ShapeError("backward: loss must be 1x1, got " + value(loss).shape());
  if (!requires_grad(loss)) return;
  grad_of(loss.index)(0, 0) = 1.0;
  for (std::size_t i = loss.index + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.needs_grad || n.grad.empty()) continue;
    if (n.back) n.back(*this, i);
    if (n.is_param && grads_ != nullptr) add_inplace(grads_->grad(n.param), n.grad);
  }
}

}  // namespace patchforge
