#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "patchforge/corpus.hpp"
#include "patchforge/patching.hpp"
#include "patchforge/site_cache.hpp"

namespace patchforge {

enum class EditMethod { kFineTune, kTPatcher, kMpnOnly, kMpnAll };

/// Command-line spelling: fine-tune, t-patcher, mpn-only, mpn-all.
std::string method_flag(EditMethod m);
/// Report spelling: Fine-tuning, T-patcher, MPN(only), MPN(all).
std::string method_label(EditMethod m);
EditMethod parse_method(const std::string& flag);
bool is_patch_method(EditMethod m);

struct FineTuneConfig {
  double learning_rate = 1e-2;
  std::size_t max_steps = 100;
  bool operator==(const FineTuneConfig&) const = default;
};

struct EditConfig {
  EditMethod method = EditMethod::kTPatcher;
  /// Language indices MPN may sample from; English (0) is never listed.
  std::vector<std::size_t> language_list;
  PatchLossConfig loss;
  FineTuneConfig finetune;
  /// MPN(all) only: train on every language instead of English + one sample.
  bool train_on_all_languages = false;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Predicted label for one input under some (possibly edited) model.
using Predictor = std::function<std::size_t(const TokenSequence&)>;

struct ParallelDraw {
  std::size_t language = 0;
  const TokenSequence* input = nullptr;
};

/// Uniform draw over `language_list`; DataError when the example lacks that parallel.
ParallelDraw sample_parallel(const EditExample& example, Rng& rng, std::span<const std::size_t> language_list);

/// Language versions whose misprediction triggers an edit.
struct TriggerPolicy {
  std::vector<std::size_t> languages;
};

/// {en} for T-patcher and fine-tuning, {en, sampled} for MPN(only), every
/// language of the roster for MPN(all).
TriggerPolicy trigger_policy(EditMethod m, std::size_t n_languages, std::optional<std::size_t> sampled);

struct EditDecision {
  bool needed = false;
  std::vector<std::size_t> mispredicted;
};

EditDecision needs_edit(const Predictor& predict, const EditExample& example, const TriggerPolicy& policy);

struct EditRecord {
  std::uint64_t id = 0;
  bool triggered = false;
  std::vector<std::string> mispredicted_languages;
  std::optional<std::string> sampled_language;
  std::size_t steps = 0;
  bool success = false;
};

struct EditReport {
  std::string method;
  std::uint64_t seed = 0;
  std::size_t patch_count = 0;
  std::vector<EditRecord> records;
  double wall_seconds = 0.0;
};

nlohmann::json edit_report_json(const EditReport& report);

/// theta' = base model plus patches; fine-tuning instead changes the last FFN.
struct EditedModel {
  Model model;
  PatchBank bank;
};

Predictor make_predictor(const EditedModel& edited, SiteCache& cache);

struct EditOutcome {
  EditedModel edited;
  EditReport report;
};

/// Streams `d_edit` in order, adding one patch per triggered example.
/// `cache` must belong to `model`'s trunk.
EditOutcome sequential_edit(const Model& model, std::span<const EditExample> d_edit, const EditConfig& config,
                            SiteCache& cache, std::span<const EditSiteCache* const> memory_pool,
                            const std::vector<std::string>& roster);

/// Sequentially fine-tunes the last FFN on each mispredicted English example.
EditOutcome finetune_baseline(const Model& model, std::span<const EditExample> d_edit, const EditConfig& config,
                              SiteCache& cache, const std::vector<std::string>& roster);

/// Dispatches on config.method.
EditOutcome run_edit(const Model& model, std::span<const EditExample> d_edit, const EditConfig& config,
                     SiteCache& cache, std::span<const EditSiteCache* const> memory_pool,
                     const std::vector<std::string>& roster);

}  // namespace patchforge
