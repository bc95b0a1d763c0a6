#include "patchforge/run_config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "patchforge/errors.hpp"
#include "patchforge/json_io.hpp"
#include "patchforge/random.hpp"

namespace patchforge {

PatchLossConfig RunConfig::tuned_patch_defaults() {
  PatchLossConfig p;
  p.lambda_mem = 5.0;
  p.learning_rate = 0.05;
  p.init = "first";
  p.target_preactivation = 10.0;
  p.threshold_fraction = 0.75;
  p.stop_logit_margin = 3.0;
  return p;
}

SubSeeds sub_seeds(std::uint64_t global) {
  return {derive_seed(global, "corpus"), derive_seed(global, "model-init"), derive_seed(global, "train"),
          derive_seed(global, "edit"), derive_seed(global, "locality")};
}

RunConfig RunConfig::resolved() const {
  RunConfig r = *this;
  const SubSeeds s = sub_seeds(seed);
  r.gen.seed = s.corpus;
  r.model.seed = s.model_init;
  r.train.seed = s.train;
  r.model.vocab_size = gen.vocab_size();
  r.model.n_classes = gen.n_classes();
  return r;
}

std::vector<std::string> RunConfig::violations() const {
  std::vector<std::string> out;
  for (const std::string& v : gen.violations()) out.push_back("gen: " + v);
  const RunConfig r = resolved();
  for (const std::string& v : r.model.violations()) out.push_back("model: " + v);
  for (const std::string& v : patch.violations()) out.push_back("patch: " + v);
  if (train.epochs == 0) out.emplace_back("train: epochs must be positive");
  if (train.batch_size == 0) out.emplace_back("train: batch_size must be positive");
  if (!(train.learning_rate > 0.0)) out.emplace_back("train: learning_rate must be positive");
  if (train.concept_weight < 0.0) out.emplace_back("train: concept_weight must be nonnegative");
  if (!(finetune.learning_rate > 0.0)) out.emplace_back("finetune: learning_rate must be positive");
  if (!(locality_fraction > 0.0 && locality_fraction <= 1.0)) out.emplace_back("locality_fraction must lie in (0, 1]");
  if (work_dir.empty()) out.emplace_back("work_dir must not be empty");
  for (const std::string& m : methods) {
    try {
      parse_method(m);
    } catch (const ValidationError& e) {
      out.emplace_back(e.what());
    }
  }
  return out;
}

void RunConfig::validate() const {
  const auto v = violations();
  if (v.empty()) return;
  std::string msg = "invalid run config:";
  for (const auto& s : v) msg += " " + s + ";";
  throw ValidationError(msg);
}

nlohmann::json run_config_json(const RunConfig& c) {
  nlohmann::json gen = c.gen;
  nlohmann::json model = c.model;
  nlohmann::json train = c.train;
  gen.erase("seed");
  model.erase("seed");
  model.erase("vocab_size");
  model.erase("n_classes");
  train.erase("seed");
  return {{"seed", c.seed},
          {"work_dir", c.work_dir},
          {"gen", gen},
          {"model", model},
          {"train", train},
          {"methods", c.methods},
          {"patch", c.patch},
          {"finetune", c.finetune},
          {"train_on_all_languages", c.train_on_all_languages},
          {"locality_fraction", c.locality_fraction},
          {"threads", c.threads}};
}

namespace {

void check_known_keys(const nlohmann::json& given, const nlohmann::json& known, const std::string& where) {
  if (!given.is_object()) return;
  for (const auto& [key, value] : given.items()) {
    const std::string path = where.empty() ? key : where + "." + key;
    if (!known.is_object() || !known.contains(key)) throw ValidationError("unknown config key '" + path + "'");
    check_known_keys(value, known[key], path);
  }
}

}  // namespace

RunConfig run_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("config must be a JSON object");
  check_known_keys(j, run_config_json(RunConfig{}), "");
  RunConfig c;
  try {
    c.seed = j.value("seed", c.seed);
    c.work_dir = j.value("work_dir", c.work_dir);
    if (j.contains("gen")) c.gen = j["gen"].get<GenConfig>();
    if (j.contains("model")) c.model = j["model"].get<ModelConfig>();
    if (j.contains("train")) c.train = j["train"].get<TrainConfig>();
    c.methods = j.value("methods", c.methods);
    // Missing patch keys fall back to the tuned values, not the struct defaults.
    if (j.contains("patch")) {
      nlohmann::json p = RunConfig::tuned_patch_defaults();
      p.update(j["patch"]);
      c.patch = p.get<PatchLossConfig>();
    }
    if (j.contains("finetune")) {
      nlohmann::json f = c.finetune;
      f.update(j["finetune"]);
      c.finetune = f.get<FineTuneConfig>();
    }
    c.train_on_all_languages = j.value("train_on_all_languages", c.train_on_all_languages);
    c.locality_fraction = j.value("locality_fraction", c.locality_fraction);
    c.threads = j.value("threads", c.threads);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("bad config value: ") + e.what());
  }
  return c;
}

void apply_override(nlohmann::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ValidationError("override '" + assignment + "' is not key=value");
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  nlohmann::json* node = &j;
  std::stringstream parts(path);
  std::string key;
  std::vector<std::string> keys;
  while (std::getline(parts, key, '.')) keys.push_back(key);
  for (std::size_t i = 0; i < keys.size(); ++i) {
    if (keys[i].empty()) throw ValidationError("override path '" + path + "' has an empty component");
    if (!node->is_object()) *node = nlohmann::json::object();
    node = &(*node)[keys[i]];
  }
  *node = value;
}

RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read config " + path.string());
  nlohmann::json j = nlohmann::json::parse(f, nullptr, false);
  if (j.is_discarded()) throw ValidationError("config " + path.string() + " is not valid JSON");
  for (const std::string& o : overrides) apply_override(j, o);
  RunConfig c = run_config_from_json(j);
  if (const char* env = std::getenv("PATCHFORGE_SEED"); env != nullptr && *env != '\0') {
    char* end = nullptr;
    const unsigned long long s = std::strtoull(env, &end, 10);
    if (end == env || *end != '\0') throw ValidationError(std::string("PATCHFORGE_SEED is not an integer: ") + env);
    c.seed = s;
  }
  c.validate();
  return c;
}

std::string config_hash(const RunConfig& config) {
  nlohmann::json j = run_config_json(config);
  // Where artifacts go and how many threads compute them does not change them.
  j.erase("work_dir");
  j.erase("threads");
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(j.dump())));
  return buf;
}

}  // namespace patchforge
