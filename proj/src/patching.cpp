#include "patchforge/patching.hpp"

#include <cmath>
#include <limits>

#include "patchforge/errors.hpp"

namespace patchforge {

std::vector<std::string> PatchLossConfig::violations() const {
  std::vector<std::string> out;
  if (!(margin > 0.0) || !std::isfinite(margin)) out.emplace_back("margin must be positive and finite");
  for (double w : {lambda_edit, lambda_act, lambda_mem}) {
    if (!(w >= 0.0) || !std::isfinite(w)) out.emplace_back("loss weights must be nonnegative and finite");
  }
  if (!(learning_rate > 0.0)) out.emplace_back("learning_rate must be positive");
  if (init != "default" && init != "first" && init != "zeros") {
    out.emplace_back("init must be \"default\", \"first\" or \"zeros\"");
  }
  if (key_noise < 0.0 || value_noise < 0.0) out.emplace_back("init noise scales must be nonnegative");
  if (!(target_preactivation >= 0.0) || !std::isfinite(target_preactivation)) {
    out.emplace_back("target_preactivation must be nonnegative and finite");
  }
  if (!(stop_logit_margin >= 0.0) || !std::isfinite(stop_logit_margin)) {
    out.emplace_back("stop_logit_margin must be nonnegative and finite");
  }
  if (!(threshold_fraction >= 0.0 && threshold_fraction < 1.0)) out.emplace_back("threshold_fraction must lie in [0, 1)");
  return out;
}

void PatchLossConfig::validate() const {
  const auto v = violations();
  if (v.empty()) return;
  std::string msg = "invalid patch loss config:";
  for (const auto& s : v) msg += " " + s + ";";
  throw ValidationError(msg);
}

TrainablePatch::TrainablePatch(const Patch& patch)
    : key(patch.key.size(), 1), bias(1, 1, patch.bias), value(1, patch.value.size()) {
  for (std::size_t i = 0; i < patch.key.size(); ++i) key(i, 0) = patch.key[i];
  for (std::size_t i = 0; i < patch.value.size(); ++i) value(0, i) = patch.value[i];
}

void TrainablePatch::write_to(Patch& patch) const {
  if (patch.frozen) throw SequencingError("refusing to modify frozen patch " + std::to_string(patch.id));
  patch.key.assign(key.data().begin(), key.data().end());
  patch.bias = bias(0, 0);
  patch.value.assign(value.data().begin(), value.data().end());
}

std::vector<ParamSlot> TrainablePatch::slots() {
  return {{kPatchKeyId, &key, "patch.key"}, {kPatchBiasId, &bias, "patch.bias"}, {kPatchValueId, &value, "patch.value"}};
}

namespace {

const Patch& unfrozen_patch(const PatchBank& bank) {
  if (!bank.has_unfrozen()) throw SequencingError("patch losses need exactly one unfrozen patch");
  return bank.patches().back();
}

// Residual plus base FFN plus frozen patches at position 0: everything the
// trainable patch adds onto.
Matrix frozen_output(const Model& model, const PatchBank& bank, const EditSiteCache& site) {
  const EncoderLayer& l = model.editable_layer();
  auto q = site.ffn_input.row(0);
  Vector out = ffn_forward(q, l.ffn_keys, l.ffn_key_bias.data(), l.ffn_values, l.ffn_value_bias.data());
  for (const Patch& p : bank.patches()) {
    if (p.frozen) axpy(patch_activation(q, p), p.value, out);
  }
  axpy(1.0, site.residual.row(0), out);
  return Matrix::row_vector(out);
}

}  // namespace

PatchLosses patch_losses(const Model& model, const PatchBank& bank, std::span<const EditInput> edit_batch,
                         std::span<const EditSiteCache* const> memory_batch, const PatchLossConfig& cfg,
                         GradStore* grads) {
  return patch_losses(model, bank, TrainablePatch(unfrozen_patch(bank)), edit_batch, memory_batch, cfg, grads);
}

PatchLosses patch_losses(const Model& model, const PatchBank& bank, const TrainablePatch& trainable,
                         std::span<const EditInput> edit_batch, std::span<const EditSiteCache* const> memory_batch,
                         const PatchLossConfig& cfg, GradStore* grads) {
  if (edit_batch.empty()) throw ValidationError("patch_losses: empty edit batch");
  unfrozen_patch(bank);

  Tape tape(grads);
  Var key = tape.parameter(kPatchKeyId, trainable.key);
  Var bias = tape.parameter(kPatchBiasId, trainable.bias);
  Var value = tape.parameter(kPatchValueId, trainable.value);

  PatchLosses out;
  std::vector<Var> ce_terms, act_terms;
  for (const EditInput& in : edit_batch) {
    const Matrix& q = in.site->ffn_input;
    Var acts = tape.gelu(tape.add_scalar(tape.matmul(tape.constant_ref(q), key), bias));
    const std::size_t offsets[] = {0, q.rows()};
    Var peak = tape.segment_max(acts, offsets);
    Var first = tape.slice_rows(acts, 0, 1);
    Var hidden = tape.add(tape.constant(frozen_output(model, bank, *in.site)), tape.scale_by(value, first));
    Var logits = build_head(model, tape, hidden);
    ce_terms.push_back(tape.cross_entropy(logits, in.label));
    act_terms.push_back(tape.squared_hinge(peak, cfg.margin));
    const Matrix& lv = tape.value(logits);
    out.correct.push_back(argmax(lv.data()) == in.label);
    double rival = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < lv.cols(); ++c) {
      if (c != in.label) rival = std::max(rival, lv(0, c));
    }
    out.logit_margin.push_back(lv(0, in.label) - rival);
    out.activation.push_back(tape.scalar(peak));
  }
  const std::vector<double> edit_weights(edit_batch.size(), 1.0 / static_cast<double>(edit_batch.size()));
  Var l_edit = tape.weighted_sum(ce_terms, edit_weights);
  Var l_act = tape.weighted_sum(act_terms, edit_weights);

  std::vector<Var> terms = {l_edit, l_act};
  std::vector<double> weights = {cfg.lambda_edit, cfg.lambda_act};
  if (!memory_batch.empty()) {
    std::size_t rows = 0;
    for (const EditSiteCache* m : memory_batch) rows += m->ffn_input.rows();
    Matrix stacked(rows, trainable.key.rows());
    std::vector<std::size_t> offsets = {0};
    for (const EditSiteCache* m : memory_batch) {
      const Matrix& q = m->ffn_input;
      std::copy(q.data().begin(), q.data().end(), stacked.data().begin() + static_cast<std::ptrdiff_t>(offsets.back() * q.cols()));
      offsets.push_back(offsets.back() + q.rows());
    }
    Var acts = tape.gelu(tape.add_scalar(tape.matmul(tape.constant(std::move(stacked)), key), bias));
    Var l_mem = tape.mean(tape.square(tape.segment_max(acts, offsets)));
    terms.push_back(l_mem);
    weights.push_back(cfg.lambda_mem);
    out.mem = tape.scalar(l_mem);
  }
  Var total = tape.weighted_sum(terms, weights);
  out.edit = tape.scalar(l_edit);
  out.act = tape.scalar(l_act);
  out.total = tape.scalar(total);
  if (grads != nullptr) tape.backward(total);
  return out;
}

namespace {

// Sum of the rows of q that the init strategy looks at, and how many there were.
std::size_t accumulate_rows(const Matrix& q, const PatchLossConfig& cfg, Vector& sum) {
  const std::size_t rows = cfg.init == "first" ? 1 : q.rows();
  for (std::size_t r = 0; r < rows; ++r) axpy(1.0, q.row(r), sum);
  return rows;
}

}  // namespace

Vector memory_center(std::span<const EditSiteCache* const> memory_pool, const PatchLossConfig& cfg) {
  if (memory_pool.empty()) return {};
  Vector sum(memory_pool.front()->ffn_input.cols(), 0.0);
  std::size_t rows = 0;
  for (const EditSiteCache* m : memory_pool) rows += accumulate_rows(m->ffn_input, cfg, sum);
  for (double& v : sum) v /= static_cast<double>(rows);
  return sum;
}

Patch new_patch(const Model& model, const PatchBank& bank, std::span<const EditInput> edit_batch,
                std::uint64_t origin_example_id, const PatchLossConfig& cfg, Rng& rng,
                std::span<const double> center) {
  if (bank.has_unfrozen()) throw SequencingError("new_patch: the bank already holds an unfrozen patch");
  if (edit_batch.empty()) throw ValidationError("new_patch: empty edit batch");
  const std::size_t d = model.config().d_model;
  if (!center.empty() && center.size() != d) throw ShapeError("new_patch: center width does not match d_model");
  Patch p;
  p.id = bank.next_id();
  p.origin_example_id = origin_example_id;
  p.key.assign(d, 0.0);
  p.value.assign(d, 0.0);
  p.bias = -cfg.margin;
  if (cfg.init == "zeros") return p;

  std::size_t rows = 0;
  for (const EditInput& in : edit_batch) rows += accumulate_rows(in.site->ffn_input, cfg, p.key);
  for (std::size_t i = 0; i < d; ++i) {
    p.key[i] /= static_cast<double>(rows);
    if (!center.empty()) p.key[i] -= center[i];
  }
  if (!center.empty() && cfg.target_preactivation > 0.0) {
    const double sq = dot(p.key, p.key);
    if (sq > 0.0) {
      const double scale = cfg.target_preactivation / ((1.0 - cfg.threshold_fraction) * sq);
      for (double& k : p.key) k *= scale;
      p.bias = -cfg.threshold_fraction * scale * sq;
    }
  }
  for (double& k : p.key) k += cfg.key_noise * rng.normal();
  if (!center.empty()) p.bias -= dot(center, p.key);
  for (double& v : p.value) v = cfg.value_noise * rng.normal();
  return p;
}

PatchTrainStats train_patch(const Model& model, PatchBank& bank, std::span<const EditInput> edit_batch,
                            std::span<const EditSiteCache* const> memory_pool, const PatchLossConfig& cfg, Rng& rng) {
  cfg.validate();
  TrainablePatch trainable(unfrozen_patch(bank));
  std::vector<ParamSlot> slots = trainable.slots();
  GradStore grads;
  for (const ParamSlot& s : slots) grads.register_param(s.id, s.value->rows(), s.value->cols());
  AdamW opt(AdamWConfig{cfg.learning_rate, 0.9, 0.999, 1e-8, 0.0, 0});

  std::vector<const EditSiteCache*> memory(memory_pool.empty() ? 0 : cfg.memory_batch);
  PatchTrainStats stats;
  for (std::size_t step = 0;; ++step) {
    for (auto& m : memory) m = memory_pool[static_cast<std::size_t>(rng.below(memory_pool.size()))];
    grads.zero();
    stats.final_losses = patch_losses(model, bank, trainable, edit_batch, memory, cfg, &grads);
    bool done = true;
    for (std::size_t i = 0; i < edit_batch.size(); ++i) {
      if (!stats.final_losses.correct[i]) done = false;
      if (stats.final_losses.logit_margin[i] < cfg.stop_logit_margin) done = false;
      if (cfg.stop_requires_activation && stats.final_losses.activation[i] < cfg.margin) done = false;
    }
    stats.steps = step;
    if (done) {
      stats.success = true;
      break;
    }
    if (step == cfg.max_steps) break;
    opt.step(slots, grads);
  }
  trainable.write_to(bank.unfrozen());
  bank.freeze();
  return stats;
}

}  // namespace patchforge
