#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "patchforge/corpus.hpp"
#include "patchforge/editing.hpp"

namespace patchforge {

/// Mean of I(predicted == label). Throws ValidationError on an empty set.
double fraction_correct(std::span<const std::size_t> predicted, std::span<const std::size_t> labels);

/// English edit inputs against their labels.
double reliability(const Predictor& predict, std::span<const EditExample> d_edit);

/// English rephrases against their edit labels; absent when there are none.
std::optional<double> mlg(const Predictor& predict, std::span<const EditExample> d_edit);

struct ClgResult {
  std::vector<std::pair<std::string, double>> per_language;
  double average = 0.0;
};

/// Parallel inputs of every non-English roster language against the English label.
ClgResult clg(const Predictor& predict, std::span<const EditExample> d_edit, const std::vector<std::string>& roster);

/// Seeded subsample of English D_train inputs; at least one example.
std::vector<LabeledSequence> locality_train_sample(std::span<const EditExample> d_train, double fraction,
                                                   std::uint64_t seed);

struct LocalityResult {
  double train = 0.0;
  double test = 0.0;
};

LocalityResult locality(const Predictor& predict, std::span<const LabeledSequence> train_sample,
                        std::span<const LabeledSequence> test);

/// Examples the predictor gets wrong in every roster language.
std::vector<EditExample> error_set_select(const Predictor& predict, std::span<const EditExample> d_edit,
                                          std::size_t n_languages);

struct MetricsReport {
  std::string method;
  std::size_t patch_count = 0;
  double reliability = 0.0;
  std::optional<double> mlg;
  std::vector<std::pair<std::string, double>> clg_per_language;
  double clg_avg = 0.0;
  double locality_train = 0.0;
  double locality_test = 0.0;
  std::size_t locality_train_size = 0;
  std::uint64_t locality_seed = 0;
  std::uint64_t edit_seed = 0;
};

/// Everything the metrics read besides the predictor.
struct EvalSets {
  std::span<const EditExample> d_edit;
  std::vector<LabeledSequence> train_sample;
  std::vector<LabeledSequence> test;
  std::vector<std::string> roster;
  std::uint64_t locality_seed = 0;
};

MetricsReport evaluate(const std::string& method, std::size_t patch_count, const Predictor& predict,
                       const EvalSets& sets);

/// Header line of the CSV report, without the trailing newline.
std::string report_csv_header(const std::vector<std::string>& roster);
/// "# config_hash=<hash>", header, one row per report, 4 decimals.
std::string report_csv(std::span<const MetricsReport> reports, const std::string& config_hash);
nlohmann::json report_json(std::span<const MetricsReport> reports, const std::string& config_hash);

/// Writes `stem`.csv and `stem`.json; IoError when a file cannot be written.
void emit_report(std::span<const MetricsReport> reports, const std::filesystem::path& stem,
                 const std::string& config_hash);

}  // namespace patchforge
