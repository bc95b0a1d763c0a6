#include "patchforge/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "patchforge/errors.hpp"
#include "patchforge/json_io.hpp"

namespace patchforge {

using nlohmann::json;

std::string split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kEdit: return "edit";
    case Split::kTest: return "test";
  }
  return "train";
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kVal;
  if (name == "edit") return Split::kEdit;
  if (name == "test") return Split::kTest;
  throw DataError("unknown split '" + name + "'");
}

std::size_t GenConfig::n_test_facts() const {
  return static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n_facts)));
}

std::size_t GenConfig::content_tokens() const {
  return n_entities + n_relations + n_attributes * values_per_attribute + n_entity_types;
}

std::size_t GenConfig::filler_tokens() const {
  return tokens_per_language > content_tokens() ? tokens_per_language - content_tokens() : 0;
}

std::size_t GenConfig::vocab_size() const {
  return static_cast<std::size_t>(kFirstLanguageToken) + n_languages() * tokens_per_language;
}

std::vector<std::string> GenConfig::violations() const {
  std::vector<std::string> out;
  if (languages.empty()) out.emplace_back("at least one language (English) is required");
  if (resource_weights.size() != languages.size()) out.emplace_back("resource_weights must match languages");
  for (double w : resource_weights) {
    if (!(w > 0.0)) out.emplace_back("resource weights must be positive");
  }
  if (!resource_weights.empty() &&
      *std::max_element(resource_weights.begin(), resource_weights.end()) > resource_weights[0]) {
    out.emplace_back("English (language 0) must carry the largest resource weight");
  }
  if (split_ratios.size() != 3) {
    out.emplace_back("split_ratios needs three entries (train, val, edit)");
  } else {
    double total = 0.0;
    for (double r : split_ratios) {
      if (r < 0.0) out.emplace_back("split ratios must be nonnegative");
      total += r;
    }
    if (std::abs(total - 1.0) > 1e-9) out.emplace_back("split ratios must sum to 1");
  }
  if (n_entities == 0 || n_relations == 0) out.emplace_back("n_entities and n_relations must be positive");
  if (n_attributes == 0 || n_relations < n_attributes) out.emplace_back("need 1 <= n_attributes <= n_relations");
  if (values_per_attribute < 2) out.emplace_back("values_per_attribute must be at least 2");
  if (n_entity_types == 0) out.emplace_back("n_entity_types must be positive");
  if (n_facts == 0) out.emplace_back("n_facts must be positive");
  if (test_fraction < 0.0) out.emplace_back("test_fraction must be nonnegative");
  if (n_facts + n_test_facts() > n_entities * n_relations) {
    out.emplace_back("infeasible: " + std::to_string(n_facts + n_test_facts()) + " facts requested but only " +
                     std::to_string(n_entities * n_relations) + " (entity, relation) pairs exist");
  }
  if (filler_tokens() < 4) out.emplace_back("tokens_per_language leaves fewer than 4 filler tokens");
  if (min_fillers < 2 || max_fillers < min_fillers) out.emplace_back("need 2 <= min_fillers <= max_fillers");
  if (exception_rate < 0.0 || exception_rate > 1.0) out.emplace_back("exception_rate must lie in [0, 1]");
  if (!nli_mode && rephrases_per_example == 0) out.emplace_back("edit examples need at least one rephrase");
  return out;
}

void GenConfig::validate() const {
  const auto v = violations();
  if (v.empty()) return;
  std::string msg = "invalid corpus config:";
  for (const auto& s : v) msg += " " + s + ";";
  throw ValidationError(msg);
}

Vocabulary::Vocabulary(const GenConfig& config)
    : block_(config.tokens_per_language),
      n_languages_(config.n_languages()),
      n_entities_(config.n_entities),
      n_relations_(config.n_relations),
      n_objects_(config.n_attributes * config.values_per_attribute),
      values_per_attribute_(config.values_per_attribute),
      n_types_(config.n_entity_types),
      n_fillers_(config.filler_tokens()),
      size_(config.vocab_size()) {
  Rng rng(derive_seed(config.seed, "filler-permutation"));
  filler_perm_.resize(n_languages_);
  filler_inv_.resize(n_languages_);
  for (std::size_t l = 0; l < n_languages_; ++l) {
    std::vector<std::size_t> perm(n_fillers_);
    for (std::size_t i = 0; i < n_fillers_; ++i) perm[i] = i;
    if (l != 0) rng.shuffle(perm);
    std::vector<std::size_t> inv(n_fillers_);
    for (std::size_t i = 0; i < n_fillers_; ++i) inv[perm[i]] = i;
    filler_perm_[l] = std::move(perm);
    filler_inv_[l] = std::move(inv);
  }
}

Vocabulary::Kind Vocabulary::kind(int token) const {
  if (token < 0 || static_cast<std::size_t>(token) >= size_) {
    throw DataError("token " + std::to_string(token) + " outside vocabulary of " + std::to_string(size_));
  }
  if (token < kFirstLanguageToken) return Kind::kSpecial;
  const std::size_t local = local_id(token);
  if (local < n_entities_) return Kind::kEntity;
  if (local < n_entities_ + n_relations_) return Kind::kRelation;
  if (local < n_entities_ + n_relations_ + n_objects_) return Kind::kObject;
  if (local < n_entities_ + n_relations_ + n_objects_ + n_types_) return Kind::kType;
  return Kind::kFiller;
}

std::size_t Vocabulary::language_of(int token) const {
  if (token < kFirstLanguageToken) return 0;
  return (static_cast<std::size_t>(token) - kFirstLanguageToken) / block_;
}

std::size_t Vocabulary::local_id(int token) const {
  return (static_cast<std::size_t>(token) - kFirstLanguageToken) % block_;
}

int Vocabulary::token(std::size_t lang, std::size_t local) const {
  return static_cast<int>(kFirstLanguageToken + lang * block_ + local);
}

int Vocabulary::object(std::size_t lang, std::size_t attribute, std::size_t value) const {
  return token(lang, n_entities_ + n_relations_ + attribute * values_per_attribute_ + value);
}

int Vocabulary::filler(std::size_t lang, std::size_t english_filler) const {
  return token(lang, n_entities_ + n_relations_ + n_objects_ + n_types_ + filler_perm_[lang][english_filler]);
}

TokenSequence Vocabulary::to_language(const TokenSequence& english, std::size_t lang) const {
  if (lang >= n_languages_) throw DataError("language index " + std::to_string(lang) + " out of range");
  TokenSequence out;
  out.ids.reserve(english.ids.size());
  const std::size_t filler_base = n_entities_ + n_relations_ + n_objects_ + n_types_;
  for (int t : english.ids) {
    const Kind k = kind(t);
    if (k == Kind::kSpecial) {
      out.ids.push_back(t);
      continue;
    }
    if (language_of(t) != 0) throw DataError("token " + std::to_string(t) + " is not an English token");
    const std::size_t local = local_id(t);
    if (k == Kind::kFiller) {
      out.ids.push_back(filler(lang, local - filler_base));
    } else {
      out.ids.push_back(token(lang, local));
    }
  }
  return out;
}

TokenSequence Vocabulary::to_english(const TokenSequence& x, std::size_t lang) const {
  TokenSequence out;
  out.ids.reserve(x.ids.size());
  const std::size_t filler_base = n_entities_ + n_relations_ + n_objects_ + n_types_;
  for (int t : x.ids) {
    const Kind k = kind(t);
    if (k == Kind::kSpecial) {
      out.ids.push_back(t);
      continue;
    }
    if (language_of(t) != lang) throw DataError("token " + std::to_string(t) + " is not in language " + std::to_string(lang));
    const std::size_t local = local_id(t);
    if (k == Kind::kFiller) {
      out.ids.push_back(token(0, filler_base + filler_inv_[lang][local - filler_base]));
    } else {
      out.ids.push_back(token(0, local));
    }
  }
  return out;
}

std::vector<std::size_t> decode_content(const Vocabulary& vocab, const TokenSequence& x) {
  std::vector<std::size_t> out;
  for (int t : x.ids) {
    const auto k = vocab.kind(t);
    if (k != Vocabulary::Kind::kSpecial && k != Vocabulary::Kind::kFiller) {
      out.push_back(vocab.local_id(t));
    }
  }
  return out;
}

const TokenSequence& EditExample::input(std::size_t lang) const {
  if (lang == 0) return english;
  auto it = parallels.find(lang);
  if (it == parallels.end()) {
    throw DataError("example " + std::to_string(id) + " has no parallel for language " + std::to_string(lang));
  }
  return it->second;
}

const std::vector<EditExample>& Dataset::split(Split s) const {
  switch (s) {
    case Split::kTrain: return train;
    case Split::kVal: return val;
    case Split::kEdit: return edit;
    case Split::kTest: return test;
  }
  return train;
}

std::vector<LabeledSequence> flatten(const std::vector<EditExample>& examples) {
  std::vector<LabeledSequence> out;
  for (const EditExample& e : examples) {
    out.push_back({e.english, e.label, 0, e.id});
    for (const auto& [lang, seq] : e.parallels) out.push_back({seq, e.label, lang, e.id});
  }
  return out;
}

std::vector<LabeledSequence> flatten_english(const std::vector<EditExample>& examples) {
  std::vector<LabeledSequence> out;
  out.reserve(examples.size());
  for (const EditExample& e : examples) out.push_back({e.english, e.label, 0, e.id});
  return out;
}

std::string label_name(std::size_t label, bool nli_mode) {
  static const char* kFact[] = {"SUPPORTED", "REFUTED"};
  static const char* kNli[] = {"ENTAILMENT", "NEUTRAL", "CONTRADICTION"};
  if (nli_mode) {
    if (label < 3) return kNli[label];
  } else if (label < 2) {
    return kFact[label];
  }
  throw DataError("label index " + std::to_string(label) + " out of range");
}

std::size_t parse_label(const std::string& name, bool nli_mode) {
  const std::size_t n = nli_mode ? 3 : 2;
  for (std::size_t i = 0; i < n; ++i) {
    if (label_name(i, nli_mode) == name) return i;
  }
  throw DataError("unknown label '" + name + "'");
}

namespace {

// Interleaves `content` (order kept) with `n_fillers` random fillers after the sentinel.
TokenSequence render(const Vocabulary& vocab, const GenConfig& cfg, const std::vector<int>& content, Rng& rng) {
  const std::size_t n_fillers = cfg.min_fillers + static_cast<std::size_t>(rng.below(cfg.max_fillers - cfg.min_fillers + 1));
  std::vector<bool> is_filler(content.size() + n_fillers, false);
  for (std::size_t i = 0; i < n_fillers; ++i) is_filler[i] = true;
  rng.shuffle(is_filler);
  TokenSequence out;
  out.ids.push_back(kClsToken);
  std::size_t next = 0;
  for (bool f : is_filler) {
    if (f) {
      out.ids.push_back(vocab.filler(0, static_cast<std::size_t>(rng.below(cfg.filler_tokens()))));
    } else {
      out.ids.push_back(content[next++]);
    }
  }
  return out;
}

std::size_t other_value(std::size_t v, std::size_t n_values, Rng& rng) {
  return (v + 1 + static_cast<std::size_t>(rng.below(n_values - 1))) % n_values;
}

}  // namespace

TokenSequence make_rephrase(const Vocabulary& vocab, const GenConfig& config, const TokenSequence& english, Rng& rng) {
  std::vector<int> content;
  for (int t : english.ids) {
    if (t == kClsToken) continue;
    const auto k = vocab.kind(t);
    if (k != Vocabulary::Kind::kFiller) content.push_back(t);
  }
  return render(vocab, config, content, rng);
}

Dataset generate_corpus(const GenConfig& cfg) {
  cfg.validate();
  const Vocabulary vocab(cfg);
  Rng rng(derive_seed(cfg.seed, "corpus"));
  const std::size_t n_values = cfg.values_per_attribute;

  std::vector<std::vector<std::size_t>> pattern(cfg.n_entity_types, std::vector<std::size_t>(cfg.n_attributes));
  for (auto& row : pattern) {
    for (auto& v : row) v = static_cast<std::size_t>(rng.below(n_values));
  }
  std::vector<std::size_t> type_of(cfg.n_entities);
  for (auto& t : type_of) t = static_cast<std::size_t>(rng.below(cfg.n_entity_types));

  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  pairs.reserve(cfg.n_entities * cfg.n_relations);
  for (std::size_t e = 0; e < cfg.n_entities; ++e) {
    for (std::size_t r = 0; r < cfg.n_relations; ++r) pairs.emplace_back(e, r);
  }
  rng.shuffle(pairs);

  const std::size_t n_train = static_cast<std::size_t>(std::llround(cfg.split_ratios[0] * static_cast<double>(cfg.n_facts)));
  const std::size_t n_val = static_cast<std::size_t>(std::llround(cfg.split_ratios[1] * static_cast<double>(cfg.n_facts)));
  const std::size_t total = cfg.n_facts + cfg.n_test_facts();

  // True value of every (entity, relation) fact, exceptions included.
  auto true_value = [&](std::size_t e, std::size_t r, bool exception) {
    const std::size_t v = pattern[type_of[e]][r % cfg.n_attributes];
    return exception ? other_value(v, n_values, rng) : v;
  };

  Dataset ds;
  ds.config = cfg;
  Rng render_rng(derive_seed(cfg.seed, "render"));
  for (std::size_t i = 0; i < total; ++i) {
    const auto [entity, relation] = pairs[i];
    EditExample ex;
    ex.id = i;
    ex.split = i < n_train ? Split::kTrain
               : i < n_train + n_val ? Split::kVal
               : i < cfg.n_facts ? Split::kEdit
                                 : Split::kTest;
    const bool exception = rng.uniform() < cfg.exception_rate;
    const std::size_t attribute = relation % cfg.n_attributes;
    const std::size_t value = true_value(entity, relation, exception);
    std::vector<int> content;
    if (!cfg.nli_mode) {
      const bool supported = rng.uniform() < 0.5;
      const std::size_t shown = supported ? value : other_value(value, n_values, rng);
      ex.label = supported ? 0 : 1;
      content = {vocab.type_marker(0, type_of[entity]), vocab.entity(0, entity), vocab.relation(0, relation),
                 vocab.object(0, attribute, shown)};
    } else {
      const double u = rng.uniform();
      std::size_t relation2 = relation;
      std::size_t shown = value;
      if (u < 1.0 / 3.0 && cfg.n_attributes > 1) {
        ex.label = 1;  // neutral: hypothesis reads a different attribute
        do {
          relation2 = static_cast<std::size_t>(rng.below(cfg.n_relations));
        } while (relation2 % cfg.n_attributes == attribute);
        shown = static_cast<std::size_t>(rng.below(n_values));
      } else {
        do {
          relation2 = static_cast<std::size_t>(rng.below(cfg.n_relations));
        } while (relation2 % cfg.n_attributes != attribute);
        const bool entails = rng.uniform() < 0.5;
        ex.label = entails ? 0 : 2;
        shown = entails ? value : other_value(value, n_values, rng);
      }
      content = {vocab.type_marker(0, type_of[entity]), vocab.entity(0, entity), vocab.relation(0, relation),
                 vocab.object(0, attribute, value),
                 kSepToken, vocab.entity(0, entity), vocab.relation(0, relation2),
                 vocab.object(0, relation2 % cfg.n_attributes, shown)};
    }
    ex.english = render(vocab, cfg, content, render_rng);
    for (std::size_t lang = 1; lang < cfg.n_languages(); ++lang) {
      bool include = true;
      if (ex.split == Split::kTrain) {
        include = render_rng.uniform() < cfg.resource_weights[lang] / cfg.resource_weights[0];
      }
      if (include) ex.parallels.emplace(lang, vocab.to_language(ex.english, lang));
    }
    if (ex.split == Split::kEdit && !cfg.nli_mode) {
      for (std::size_t k = 0; k < cfg.rephrases_per_example; ++k) {
        ex.rephrases.push_back(make_rephrase(vocab, cfg, ex.english, render_rng));
      }
    }
    switch (ex.split) {
      case Split::kTrain: ds.train.push_back(std::move(ex)); break;
      case Split::kVal: ds.val.push_back(std::move(ex)); break;
      case Split::kEdit: ds.edit.push_back(std::move(ex)); break;
      case Split::kTest: ds.test.push_back(std::move(ex)); break;
    }
  }
  return ds;
}

namespace {

json sequence_json(const TokenSequence& x) { return x.ids; }

TokenSequence sequence_from(const json& j, const std::string& where) {
  if (!j.is_array()) throw DataError(where + ": expected an array of token ids");
  TokenSequence out;
  for (const json& v : j) {
    if (!v.is_number_integer()) throw DataError(where + ": token ids must be integers");
    out.ids.push_back(v.get<int>());
  }
  return out;
}

json example_json(const EditExample& e, const Dataset& ds) {
  json j;
  j["id"] = e.id;
  j["split"] = split_name(e.split);
  j["label"] = label_name(e.label, ds.config.nli_mode);
  j["en"] = sequence_json(e.english);
  json reph = json::array();
  for (const auto& r : e.rephrases) reph.push_back(sequence_json(r));
  j["rephrases"] = reph;
  json par = json::object();
  for (const auto& [lang, seq] : e.parallels) par[ds.config.languages[lang]] = sequence_json(seq);
  j["parallels"] = par;
  return j;
}

}  // namespace

std::string serialize_dataset_lines(const Dataset& ds) {
  std::string out;
  for (Split s : {Split::kTrain, Split::kVal, Split::kEdit, Split::kTest}) {
    for (const EditExample& e : ds.split(s)) {
      out += example_json(e, ds).dump();
      out += '\n';
    }
  }
  return out;
}

std::string content_hash(const std::string& bytes) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(bytes)));
  return buf;
}

std::string save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  const std::string lines = serialize_dataset_lines(ds);
  const std::string hash = content_hash(lines);
  {
    std::ofstream f(dir / "dataset.jsonl", std::ios::binary);
    if (!f) throw IoError("cannot write " + (dir / "dataset.jsonl").string());
    f << lines;
  }
  json manifest;
  manifest["format"] = "patchforge-corpus-1";
  manifest["config"] = ds.config;
  manifest["content_hash"] = hash;
  manifest["counts"] = {{"train", ds.train.size()}, {"val", ds.val.size()}, {"edit", ds.edit.size()},
                        {"test", ds.test.size()}};
  std::ofstream f(dir / "manifest.json", std::ios::binary);
  if (!f) throw IoError("cannot write " + (dir / "manifest.json").string());
  f << manifest.dump(2) << '\n';
  return hash;
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json", std::ios::binary);
  if (!mf) throw IoError("cannot read " + (dir / "manifest.json").string());
  json manifest;
  try {
    manifest = json::parse(mf);
  } catch (const json::exception& e) {
    throw DataError("manifest.json: " + std::string(e.what()));
  }
  Dataset ds;
  try {
    ds.config = manifest.at("config").get<GenConfig>();
  } catch (const json::exception& e) {
    throw DataError("manifest.json config: " + std::string(e.what()));
  }
  ds.config.validate();
  const Vocabulary vocab(ds.config);

  std::ifstream df(dir / "dataset.jsonl", std::ios::binary);
  if (!df) throw IoError("cannot read " + (dir / "dataset.jsonl").string());
  std::string line;
  std::size_t line_no = 0;
  auto require = [&](const json& j, const char* field) -> const json& {
    if (!j.contains(field)) throw DataError("line " + std::to_string(line_no) + ": missing field '" + field + "'");
    return j.at(field);
  };
  while (std::getline(df, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw DataError("line " + std::to_string(line_no) + ": " + e.what());
    }
    const std::string where = "line " + std::to_string(line_no);
    EditExample ex;
    try {
      ex.id = require(j, "id").get<std::uint64_t>();
      ex.split = parse_split(require(j, "split").get<std::string>());
      ex.label = parse_label(require(j, "label").get<std::string>(), ds.config.nli_mode);
    } catch (const json::exception& e) {
      throw DataError(where + ": " + e.what());
    }
    ex.english = sequence_from(require(j, "en"), where + " field 'en'");
    for (const json& r : require(j, "rephrases")) ex.rephrases.push_back(sequence_from(r, where + " field 'rephrases'"));
    if (!j.contains("parallels")) {
      if (ex.split == Split::kEdit) {
        throw DataError(where + ": edit example " + std::to_string(ex.id) + " is missing field 'parallels'");
      }
      throw DataError(where + ": missing field 'parallels'");
    }
    for (const auto& [code, seq] : j.at("parallels").items()) {
      auto it = std::find(ds.config.languages.begin(), ds.config.languages.end(), code);
      if (it == ds.config.languages.end() || it == ds.config.languages.begin()) {
        throw DataError(where + " field 'parallels': unknown language '" + code + "'");
      }
      ex.parallels.emplace(static_cast<std::size_t>(it - ds.config.languages.begin()),
                           sequence_from(seq, where + " field 'parallels." + code + "'"));
    }
    for (int t : ex.english.ids) vocab.kind(t);
    if (ex.split == Split::kEdit) {
      for (std::size_t lang = 1; lang < ds.config.n_languages(); ++lang) {
        if (!ex.has_language(lang)) {
          throw DataError(where + ": edit example " + std::to_string(ex.id) + " lacks parallel '" +
                          ds.config.languages[lang] + "'");
        }
      }
      if (!ds.config.nli_mode && ex.rephrases.empty()) {
        throw DataError(where + ": edit example " + std::to_string(ex.id) + " has no rephrases");
      }
    }
    switch (ex.split) {
      case Split::kTrain: ds.train.push_back(std::move(ex)); break;
      case Split::kVal: ds.val.push_back(std::move(ex)); break;
      case Split::kEdit: ds.edit.push_back(std::move(ex)); break;
      case Split::kTest: ds.test.push_back(std::move(ex)); break;
    }
  }
  return ds;
}

Dataset gen_corpus(const GenConfig& config, const std::filesystem::path& dir) {
  Dataset ds = generate_corpus(config);
  save_dataset(ds, dir);
  return ds;
}

}  // namespace patchforge
