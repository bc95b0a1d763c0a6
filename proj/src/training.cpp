#include "patchforge/training.hpp"

#include <cmath>

#include "patchforge/errors.hpp"
#include "patchforge/random.hpp"

namespace patchforge {

ConceptHeads init_concept_heads(const Model& model, const GenConfig& corpus, std::uint64_t seed) {
  const std::size_t d = model.config().d_model;
  const std::size_t counts[3] = {corpus.n_entities, corpus.n_relations, corpus.n_attributes * corpus.values_per_attribute};
  ConceptHeads h;
  Rng rng(seed);
  const ParamId first = model.parameters().size();
  for (std::size_t i = 0; i < 3; ++i) {
    h.weight[i] = Matrix(d, counts[i]);
    for (double& v : h.weight[i].data()) v = rng.normal() / std::sqrt(static_cast<double>(d));
    h.bias[i] = Matrix(1, counts[i]);
    h.weight_id[i] = first + 2 * i;
    h.bias_id[i] = first + 2 * i + 1;
  }
  return h;
}

std::array<std::size_t, 3> concept_targets(const Vocabulary& vocab, const GenConfig& corpus, const TokenSequence& x) {
  std::array<std::size_t, 3> out{};
  std::array<bool, 3> seen{};
  for (int t : x.ids) {
    const auto k = vocab.kind(t);
    const std::size_t local = vocab.local_id(t);
    if (k == Vocabulary::Kind::kEntity && !seen[0]) {
      out[0] = local;
      seen[0] = true;
    } else if (k == Vocabulary::Kind::kRelation && !seen[1]) {
      out[1] = local - corpus.n_entities;
      seen[1] = true;
    } else if (k == Vocabulary::Kind::kObject && !seen[2]) {
      out[2] = local - corpus.n_entities - corpus.n_relations;
      seen[2] = true;
    }
  }
  if (!seen[0] || !seen[1] || !seen[2]) throw DataError("sequence lacks an entity, relation or object token");
  return out;
}

double sequence_loss(const Model& model, const TokenSequence& x, std::size_t label, double smoothing,
                     GradStore* grads, const ConceptHeads* heads, const std::array<std::size_t, 3>* targets,
                     double concept_weight) {
  Tape tape(grads);
  TrunkVars trunk = build_trunk(model, tape, x);
  const EncoderLayer& l = model.editable_layer();
  const auto ids = model.editable_ffn_ids();
  Var keys = tape.parameter(ids[0], l.ffn_keys);
  Var key_bias = tape.parameter(ids[1], l.ffn_key_bias);
  Var values = tape.parameter(ids[2], l.ffn_values);
  Var value_bias = tape.parameter(ids[3], l.ffn_value_bias);
  Var q0 = tape.slice_rows(trunk.ffn_input, 0, 1);
  Var hidden = tape.gelu(tape.add_row(tape.matmul(q0, keys), key_bias));
  Var ffn = tape.add_row(tape.matmul(hidden, values), value_bias);
  Var out = tape.add(tape.slice_rows(trunk.residual, 0, 1), ffn);
  Var loss = tape.cross_entropy(build_head(model, tape, out), label, smoothing);
  if (heads != nullptr && targets != nullptr && concept_weight > 0.0) {
    Var normed = build_final_norm(model, tape, out);
    std::vector<Var> terms = {loss};
    std::vector<double> weights = {1.0};
    for (std::size_t i = 0; i < 3; ++i) {
      Var w = tape.parameter(heads->weight_id[i], heads->weight[i]);
      Var b = tape.parameter(heads->bias_id[i], heads->bias[i]);
      terms.push_back(tape.cross_entropy(tape.add_row(tape.matmul(normed, w), b), (*targets)[i]));
      weights.push_back(concept_weight / 3.0);
    }
    loss = tape.weighted_sum(terms, weights);
  }
  if (grads != nullptr) tape.backward(loss);
  return tape.scalar(loss);
}

double accuracy(const Model& model, const std::vector<LabeledSequence>& sequences) {
  if (sequences.empty()) throw ValidationError("accuracy over an empty set");
  std::size_t correct = 0;
  for (const LabeledSequence& s : sequences) {
    if (predict(model, s.tokens) == s.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(sequences.size());
}

TrainResult train_base(const Model& initial, const Dataset& dataset, const TrainConfig& hyper,
                       const std::function<void(std::size_t, double, double)>& on_epoch) {
  if (dataset.train.empty()) throw ValidationError("train_base: D_train is empty");
  if (dataset.val.empty()) throw ValidationError("train_base: D_val is empty");
  if (hyper.batch_size == 0) throw ValidationError("train_base: batch_size must be positive");

  TrainResult result;
  result.model = initial;
  if (hyper.epochs == 0) return result;

  Model model = initial;
  const std::vector<LabeledSequence> train = flatten(dataset.train);
  const std::vector<LabeledSequence> val = flatten_english(dataset.val);

  AdamW opt(AdamWConfig{hyper.learning_rate, 0.9, 0.999, hyper.adam_epsilon, hyper.weight_decay,
                        hyper.warmup_steps});
  std::vector<ParamSlot> slots = model.parameters();
  ConceptHeads heads = init_concept_heads(model, dataset.config, derive_seed(hyper.seed, "concept-heads"));
  std::vector<std::array<std::size_t, 3>> targets;
  if (hyper.concept_weight > 0.0) {
    const Vocabulary vocab(dataset.config);
    for (const LabeledSequence& s : train) targets.push_back(concept_targets(vocab, dataset.config, s.tokens));
    for (std::size_t i = 0; i < 3; ++i) {
      slots.push_back({heads.weight_id[i], &heads.weight[i], "concept_head." + std::to_string(i) + ".weight"});
      slots.push_back({heads.bias_id[i], &heads.bias[i], "concept_head." + std::to_string(i) + ".bias"});
    }
  }
  GradStore grads;
  for (const ParamSlot& s : slots) grads.register_param(s.id, s.value->rows(), s.value->cols());

  Rng rng(hyper.seed);
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  double best_val = -1.0;
  for (std::size_t epoch = 1; epoch <= hyper.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += hyper.batch_size) {
      const std::size_t end = std::min(order.size(), start + hyper.batch_size);
      grads.zero();
      for (std::size_t i = start; i < end; ++i) {
        const LabeledSequence& s = train[order[i]];
        epoch_loss += targets.empty()
                          ? sequence_loss(model, s.tokens, s.label, hyper.label_smoothing, &grads)
                          : sequence_loss(model, s.tokens, s.label, hyper.label_smoothing, &grads, &heads,
                                          &targets[order[i]], hyper.concept_weight);
      }
      const double inv = 1.0 / static_cast<double>(end - start);
      for (const ParamSlot& s : slots) {
        for (double& g : grads.grad(s.id).data()) g *= inv;
      }
      opt.step(slots, grads);
    }
    const double val_acc = accuracy(model, val);
    result.val_accuracy.push_back(val_acc);
    if (on_epoch) on_epoch(epoch, epoch_loss / static_cast<double>(train.size()), val_acc);
    if (val_acc > best_val) {
      best_val = val_acc;
      result.model = model;
      result.best_epoch = epoch;
    }
  }
  return result;
}

}  // namespace patchforge
