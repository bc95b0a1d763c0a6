#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "patchforge/corpus.hpp"
#include "patchforge/editing.hpp"
#include "patchforge/model.hpp"
#include "patchforge/patching.hpp"
#include "patchforge/training.hpp"

namespace patchforge {

/// Everything one run needs. The seeds inside gen/model/train are not read
/// from the file: resolve() derives them from `seed`.
struct RunConfig {
  std::uint64_t seed = 20240917;
  /// Root for every artifact; relative paths resolve against the working directory.
  std::string work_dir = "runs/default";
  GenConfig gen;
  ModelConfig model;
  TrainConfig train;
  std::vector<std::string> methods = {"fine-tune", "t-patcher", "mpn-only", "mpn-all"};
  PatchLossConfig patch = tuned_patch_defaults();
  FineTuneConfig finetune{.learning_rate = 0.03, .max_steps = 100};
  bool train_on_all_languages = false;
  /// Share of D_train used for the train-side locality score.
  double locality_fraction = 0.1;
  /// Workers for edit-site precomputation; 0 uses the hardware concurrency.
  unsigned threads = 0;

  static PatchLossConfig tuned_patch_defaults();

  /// Copy with sub-seeds filled in and model shape taken from the corpus.
  RunConfig resolved() const;
  std::vector<std::string> violations() const;
  void validate() const;
  bool operator==(const RunConfig&) const = default;
};

struct SubSeeds {
  std::uint64_t corpus = 0;
  std::uint64_t model_init = 0;
  std::uint64_t train = 0;
  std::uint64_t edit = 0;
  std::uint64_t locality = 0;
};

SubSeeds sub_seeds(std::uint64_t global);

nlohmann::json run_config_json(const RunConfig& config);

/// Unknown keys anywhere in `j` are a ValidationError.
RunConfig run_config_from_json(const nlohmann::json& j);

/// Sets the leaf at a dotted path ("patch.lambda_mem"). The value is parsed
/// as JSON when possible and taken as a string otherwise.
void apply_override(nlohmann::json& j, const std::string& assignment);

/// Reads the file, applies overrides, then the PATCHFORGE_SEED environment
/// variable, and validates.
RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

/// Hex digest of the resolved config; stamped into every artifact.
std::string config_hash(const RunConfig& config);

struct RunPaths {
  std::filesystem::path root;
  std::filesystem::path corpus() const { return root / "corpus"; }
  std::filesystem::path base_checkpoint() const { return root / "base.pfg"; }
  std::filesystem::path train_curve() const { return root / "train_curve.json"; }
  std::filesystem::path edit_checkpoint(const std::string& method_flag) const { return root / "edits" / (method_flag + ".pfg"); }
  std::filesystem::path edit_report(const std::string& method_flag) const { return root / "edits" / (method_flag + ".report.json"); }
  std::filesystem::path reports() const { return root / "reports"; }
};

}  // namespace patchforge
