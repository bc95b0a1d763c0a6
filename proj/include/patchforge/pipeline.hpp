#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "patchforge/checkpoint.hpp"
#include "patchforge/eval.hpp"
#include "patchforge/run_config.hpp"

namespace patchforge {

using LogFn = std::function<void(const std::string&)>;

/// One pipeline run over a resolved config. Stages read earlier artifacts
/// from disk when they exist and produce them otherwise, so each CLI
/// subcommand can run alone.
class Pipeline {
 public:
  explicit Pipeline(const RunConfig& config, LogFn log = {});

  const RunConfig& config() const { return config_; }
  const RunPaths& paths() const { return paths_; }
  const std::string& hash() const { return hash_; }

  /// Generates and saves the corpus; returns its content hash.
  std::string gen_data();
  /// Trains the base model and saves it with its validation curve.
  TrainResult train_base_model();
  /// Edits D_edit with one method; saves the edited checkpoint and EditReport.
  EditOutcome edit(EditMethod method);
  /// Metrics of a saved checkpoint on D_edit; writes reports/eval-<name>.{csv,json}.
  MetricsReport eval_checkpoint(const std::filesystem::path& checkpoint);
  /// gen-data, train-base, every configured method, evaluation; writes reports/table1.{csv,json}.
  std::vector<MetricsReport> reproduce();
  /// Edits only the examples the base model gets wrong in every language;
  /// writes reports/error_set.{csv,json} and the selected ids.
  std::vector<MetricsReport> error_set();

  const Dataset& dataset();
  const Model& base_model();

 private:
  void log(const std::string& msg) const;
  SiteCache& cache();
  std::span<const EditSiteCache* const> memory_pool();
  EvalSets eval_sets(std::span<const EditExample> d_edit);
  EditConfig edit_config(EditMethod method) const;
  std::vector<MetricsReport> run_methods(std::span<const EditExample> d_edit, bool save);

  RunConfig config_;
  RunPaths paths_;
  std::string hash_;
  LogFn log_;
  std::optional<Dataset> dataset_;
  std::optional<Model> base_;
  std::unique_ptr<SiteCache> cache_;
  std::vector<LabeledSequence> pool_sequences_;
  std::vector<const EditSiteCache*> pool_;
};

/// Writes `text` to `path` through a temporary file and a rename, so an
/// interrupted run never leaves a truncated artifact under the final name.
void write_file_atomic(const std::filesystem::path& path, const std::string& text);

}  // namespace patchforge
