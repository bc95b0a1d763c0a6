#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "patchforge/model.hpp"
#include "patchforge/random.hpp"

namespace patchforge {

enum class Split { kTrain, kVal, kEdit, kTest };

std::string split_name(Split s);
Split parse_split(const std::string& name);

/// Generator settings for the synthetic multilingual fact-verification corpus.
///
/// The world: every entity has a type, and every type fixes one value per
/// attribute. Each relation reads one attribute, and its objects are value
/// entities (attribute, value). A claim renders as (type marker, subject,
/// relation, object) and is SUPPORTED when the object names the fact's true
/// value. A fraction of facts are exceptions whose true value breaks the type
/// pattern, so a model that learned the rule gets them wrong in every language.
struct GenConfig {
  std::vector<std::string> languages = {"en", "de", "fr", "es", "zh", "ar"};
  std::vector<double> resource_weights = {1.0, 0.5, 0.5, 0.5, 0.15, 0.05};
  std::size_t n_entities = 60;
  std::size_t n_relations = 60;
  std::size_t n_attributes = 3;
  std::size_t values_per_attribute = 4;
  std::size_t n_entity_types = 4;
  /// Claims drawn for the train/val/edit splits (one claim per fact).
  std::size_t n_facts = 3000;
  /// Additional held-out claims for the test split, as a fraction of n_facts.
  double test_fraction = 0.1;
  std::size_t tokens_per_language = 160;
  std::size_t min_fillers = 2;
  std::size_t max_fillers = 4;
  std::vector<double> split_ratios = {0.8, 0.1, 0.1};
  double exception_rate = 0.1;
  std::size_t rephrases_per_example = 2;
  bool nli_mode = false;
  std::uint64_t seed = 1;

  std::size_t n_languages() const { return languages.size(); }
  std::size_t n_test_facts() const;
  std::size_t content_tokens() const;
  std::size_t filler_tokens() const;
  std::size_t vocab_size() const;
  std::size_t n_classes() const { return nli_mode ? 3 : 2; }

  std::vector<std::string> violations() const;
  void validate() const;
  bool operator==(const GenConfig&) const = default;
};

inline constexpr int kPadToken = 0;
inline constexpr int kClsToken = 1;
inline constexpr int kSepToken = 2;
inline constexpr int kFirstLanguageToken = 3;

/// Token-id layout. Each language owns a contiguous block of
/// tokens_per_language ids: entities, relations, objects, type markers, then fillers.
class Vocabulary {
 public:
  explicit Vocabulary(const GenConfig& config);

  enum class Kind { kSpecial, kEntity, kRelation, kObject, kType, kFiller };

  std::size_t size() const { return size_; }
  Kind kind(int token) const;
  std::size_t language_of(int token) const;
  /// Position of the token inside its language block.
  std::size_t local_id(int token) const;
  int token(std::size_t lang, std::size_t local) const;

  int entity(std::size_t lang, std::size_t e) const { return token(lang, e); }
  int relation(std::size_t lang, std::size_t r) const { return token(lang, n_entities_ + r); }
  int object(std::size_t lang, std::size_t attribute, std::size_t value) const;
  int type_marker(std::size_t lang, std::size_t type) const { return token(lang, n_entities_ + n_relations_ + n_objects_ + type); }
  int filler(std::size_t lang, std::size_t english_filler) const;

  /// Maps an English sequence into `lang`; throws DataError on foreign tokens.
  TokenSequence to_language(const TokenSequence& english, std::size_t lang) const;
  /// Inverse of to_language.
  TokenSequence to_english(const TokenSequence& x, std::size_t lang) const;

 private:
  std::size_t block_ = 0;
  std::size_t n_languages_ = 0;
  std::size_t n_entities_ = 0;
  std::size_t n_relations_ = 0;
  std::size_t n_objects_ = 0;
  std::size_t values_per_attribute_ = 0;
  std::size_t n_types_ = 0;
  std::size_t n_fillers_ = 0;
  std::size_t size_ = 0;
  // filler_perm_[lang][english filler] -> language filler; filler_inv_ is the inverse.
  std::vector<std::vector<std::size_t>> filler_perm_;
  std::vector<std::vector<std::size_t>> filler_inv_;
};

/// Content tokens of a sentence as language-local ids, in order of appearance.
std::vector<std::size_t> decode_content(const Vocabulary& vocab, const TokenSequence& x);

struct EditExample {
  std::uint64_t id = 0;
  std::size_t label = 0;
  Split split = Split::kTrain;
  TokenSequence english;
  std::vector<TokenSequence> rephrases;
  /// Keyed by language index (never 0, English lives in `english`).
  std::map<std::size_t, TokenSequence> parallels;

  /// English (lang 0) or the parallel in `lang`; throws DataError when absent.
  const TokenSequence& input(std::size_t lang) const;
  bool has_language(std::size_t lang) const { return lang == 0 || parallels.count(lang) != 0; }
  bool operator==(const EditExample&) const = default;
};

struct Dataset {
  GenConfig config;
  std::vector<EditExample> train;
  std::vector<EditExample> val;
  std::vector<EditExample> edit;
  std::vector<EditExample> test;

  const std::vector<std::string>& languages() const { return config.languages; }
  const std::vector<EditExample>& split(Split s) const;
  bool operator==(const Dataset&) const = default;
};

/// Labelled sequence in one language.
struct LabeledSequence {
  TokenSequence tokens;
  std::size_t label = 0;
  std::size_t language = 0;
  std::uint64_t example_id = 0;
};

/// Every language version present on the examples, English first per example.
std::vector<LabeledSequence> flatten(const std::vector<EditExample>& examples);
std::vector<LabeledSequence> flatten_english(const std::vector<EditExample>& examples);

std::string label_name(std::size_t label, bool nli_mode);
std::size_t parse_label(const std::string& name, bool nli_mode);

/// Builds the corpus in memory. Same config gives the same dataset.
Dataset generate_corpus(const GenConfig& config);

/// Re-renders an example's English sentence with fresh fillers at fresh positions.
TokenSequence make_rephrase(const Vocabulary& vocab, const GenConfig& config, const TokenSequence& english, Rng& rng);

/// Writes dataset.jsonl and manifest.json under `dir`; returns the content hash.
std::string save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

/// generate_corpus + save_dataset.
Dataset gen_corpus(const GenConfig& config, const std::filesystem::path& dir);

std::string serialize_dataset_lines(const Dataset& dataset);
std::string content_hash(const std::string& bytes);

}  // namespace patchforge
