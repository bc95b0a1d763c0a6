#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "patchforge/corpus.hpp"
#include "patchforge/model.hpp"

namespace patchforge {

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double learning_rate = 3e-3;
  double weight_decay = 0.01;
  std::int64_t warmup_steps = 100;
  double adam_epsilon = 1e-8;
  double label_smoothing = 0.1;
  /// Weight of the concept-recovery loss: from the first position, predict
  /// the sentence's entity, relation and object ids, which are shared by all
  /// languages. It plays the role of multilingual pretraining and is what
  /// aligns the languages' representations. 0 disables it.
  double concept_weight = 3.0;
  std::uint64_t seed = 7;
  bool operator==(const TrainConfig&) const = default;
};

struct TrainResult {
  Model model;
  /// English validation accuracy after each epoch.
  std::vector<double> val_accuracy;
  /// Epoch (1-based) of the returned checkpoint; 0 means the initial model.
  std::size_t best_epoch = 0;
};

/// Full-model training with cross-entropy on every language version in
/// D_train. Returns the checkpoint with the best English validation accuracy.
TrainResult train_base(const Model& initial, const Dataset& dataset, const TrainConfig& hyper,
                       const std::function<void(std::size_t epoch, double loss, double val)>& on_epoch = {});

/// Training-only linear heads reading the final-norm first position.
struct ConceptHeads {
  // entity, relation, object; weights d_model x count, biases 1 x count.
  std::array<Matrix, 3> weight;
  std::array<Matrix, 3> bias;
  std::array<ParamId, 3> weight_id{};
  std::array<ParamId, 3> bias_id{};
};

ConceptHeads init_concept_heads(const Model& model, const GenConfig& corpus, std::uint64_t seed);

/// Entity, relation and object ids of the first claim in `x`.
std::array<std::size_t, 3> concept_targets(const Vocabulary& vocab, const GenConfig& corpus, const TokenSequence& x);

/// Cross-entropy of one sequence, plus concept_weight times the mean concept
/// cross-entropy when heads and targets are given. Gradients go to `grads`
/// when non-null.
double sequence_loss(const Model& model, const TokenSequence& x, std::size_t label, double smoothing,
                     GradStore* grads, const ConceptHeads* heads = nullptr,
                     const std::array<std::size_t, 3>* targets = nullptr, double concept_weight = 0.0);

/// Fraction of sequences predicted correctly.
double accuracy(const Model& model, const std::vector<LabeledSequence>& sequences);

}  // namespace patchforge
