#pragma once

// JSON mappings for the config structs. Missing keys keep their defaults.

#include "json.hpp"
#include "patchforge/corpus.hpp"
#include "patchforge/editing.hpp"
#include "patchforge/model.hpp"
#include "patchforge/patching.hpp"
#include "patchforge/training.hpp"

namespace patchforge {

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(GenConfig, languages, resource_weights, n_entities, n_relations,
                                                n_attributes, values_per_attribute, n_entity_types, n_facts, test_fraction,
                                                tokens_per_language, min_fillers, max_fillers, split_ratios,
                                                exception_rate, rephrases_per_example, nli_mode, seed)

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, d_model, d_ff, n_layers, n_heads, vocab_size,
                                                n_classes, max_len, activation, embedding_std, seed)

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, epochs, batch_size, learning_rate, weight_decay,
                                                warmup_steps, adam_epsilon, label_smoothing, concept_weight, seed)

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PatchLossConfig, margin, lambda_edit, lambda_act, lambda_mem, memory_batch,
                                                max_steps, learning_rate, stop_requires_activation, stop_logit_margin,
                                                init, key_noise, value_noise, target_preactivation, threshold_fraction)

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(FineTuneConfig, learning_rate, max_steps)

}  // namespace patchforge
