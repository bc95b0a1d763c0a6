#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "patchforge/model.hpp"
#include "patchforge/optimizer.hpp"
#include "patchforge/patch_bank.hpp"
#include "patchforge/random.hpp"

namespace patchforge {

struct PatchLossConfig {
  double margin = 1.0;
  double lambda_edit = 1.0;
  double lambda_act = 1.0;
  double lambda_mem = 1.0;
  std::size_t memory_batch = 32;
  std::size_t max_steps = 500;
  double learning_rate = 1e-2;
  // When false, training stops as soon as every edit input is predicted correctly.
  bool stop_requires_activation = true;
  // Training also continues until the label's logit leads every other logit
  // by at least this much on each edit input. 0 only asks for a correct
  // prediction.
  double stop_logit_margin = 0.0;
  // "default": key from the mean q over every position of the edit inputs;
  // "first": key from q at the classification position only; "zeros".
  std::string init = "default";
  double key_noise = 1e-2;
  double value_noise = 1e-3;
  // With a memory center c and target mean q: when positive, the key is
  // rescaled so the pre-activation is this value at q and zero at
  // c + threshold_fraction * (q - c). When zero the key is q - c and the
  // pre-activation at c is -margin.
  double target_preactivation = 0.0;
  double threshold_fraction = 0.5;

  std::vector<std::string> violations() const;
  void validate() const;
  bool operator==(const PatchLossConfig&) const = default;
};

/// One member of an edit batch: the cached edit site of one language version.
struct EditInput {
  const EditSiteCache* site = nullptr;
  std::size_t label = 0;
};

// Parameter ids of the patch under training. Far above any model parameter id.
inline constexpr ParamId kPatchKeyId = 1u << 20;
inline constexpr ParamId kPatchBiasId = kPatchKeyId + 1;
inline constexpr ParamId kPatchValueId = kPatchKeyId + 2;

/// The unfrozen patch as tape-ready matrices: key d x 1, bias 1 x 1, value 1 x d.
struct TrainablePatch {
  Matrix key;
  Matrix bias;
  Matrix value;

  explicit TrainablePatch(const Patch& patch);
  void write_to(Patch& patch) const;
  std::vector<ParamSlot> slots();
};

struct PatchLosses {
  double edit = 0.0;
  double act = 0.0;
  double mem = 0.0;
  double total = 0.0;
  // Per edit input: prediction correct, and the max activation over positions.
  std::vector<bool> correct;
  std::vector<double> activation;
  // Label logit minus the best other logit.
  std::vector<double> logit_margin;
};

/// Losses of the bank's unfrozen patch. Frozen patches contribute to the
/// logits as constants. When `grads` is non-null, gradients of the patch
/// parameters (kPatch*Id) are accumulated into it; base parameters never are.
PatchLosses patch_losses(const Model& model, const PatchBank& bank, std::span<const EditInput> edit_batch,
                         std::span<const EditSiteCache* const> memory_batch, const PatchLossConfig& cfg,
                         GradStore* grads = nullptr);

/// Same as above with the unfrozen patch's parameters read from `trainable`.
PatchLosses patch_losses(const Model& model, const PatchBank& bank, const TrainablePatch& trainable,
                         std::span<const EditInput> edit_batch, std::span<const EditSiteCache* const> memory_batch,
                         const PatchLossConfig& cfg, GradStore* grads = nullptr);

/// Mean q of the memory pool, over every position or over the classification
/// position only, matching the init strategy.
Vector memory_center(std::span<const EditSiteCache* const> memory_pool, const PatchLossConfig& cfg);

/// Builds an unfrozen patch for the edit batch; the caller adds it to the bank.
/// The key is the edit inputs' mean q measured from `center` (the memory
/// pool mean), and the bias puts the activation at sigma(-margin) on `center`.
/// Throws SequencingError if the bank already holds an unfrozen patch.
Patch new_patch(const Model& model, const PatchBank& bank, std::span<const EditInput> edit_batch,
                std::uint64_t origin_example_id, const PatchLossConfig& cfg, Rng& rng,
                std::span<const double> center = {});

struct PatchTrainStats {
  std::size_t steps = 0;
  bool success = false;
  PatchLosses final_losses;
};

/// Optimizes the unfrozen patch of `bank`, then freezes it. Memory batches are
/// drawn from `memory_pool` with `rng`, fresh every step.
PatchTrainStats train_patch(const Model& model, PatchBank& bank, std::span<const EditInput> edit_batch,
                            std::span<const EditSiteCache* const> memory_pool, const PatchLossConfig& cfg, Rng& rng);

}  // namespace patchforge
