#include "patchforge/pipeline.hpp"

#include <cstdio>
#include <fstream>

#include "patchforge/errors.hpp"
#include "patchforge/json_io.hpp"
#include "patchforge/random.hpp"

namespace patchforge {

void write_file_atomic(const std::filesystem::path& path, const std::string& text) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  std::filesystem::path tmp = path;
  tmp += ".partial";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw IoError("cannot write " + tmp.string());
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!f) throw IoError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

namespace {

// Only what determines the base model; editing settings may change freely.
std::string base_hash(const RunConfig& c) {
  nlohmann::json j = {{"seed", c.seed}, {"gen", c.gen}, {"model", c.model}, {"train", c.train}};
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(j.dump())));
  return buf;
}

void emit(std::span<const MetricsReport> rows, const std::filesystem::path& stem, const std::string& hash) {
  std::error_code ec;
  std::filesystem::create_directories(stem.parent_path(), ec);
  emit_report(rows, stem, hash);
}

std::vector<std::size_t> non_english(std::size_t n_languages) {
  std::vector<std::size_t> out;
  for (std::size_t l = 1; l < n_languages; ++l) out.push_back(l);
  return out;
}

}  // namespace

Pipeline::Pipeline(const RunConfig& config, LogFn log)
    : config_(config.resolved()), paths_{config.work_dir}, hash_(config_hash(config)), log_(std::move(log)) {
  config_.validate();
}

void Pipeline::log(const std::string& msg) const {
  if (log_) log_(msg);
}

std::string Pipeline::gen_data() {
  dataset_ = generate_corpus(config_.gen);
  const std::string h = save_dataset(*dataset_, paths_.corpus());
  log("corpus: " + std::to_string(dataset_->train.size()) + " train / " + std::to_string(dataset_->val.size()) +
      " val / " + std::to_string(dataset_->edit.size()) + " edit / " + std::to_string(dataset_->test.size()) +
      " test, hash " + h);
  return h;
}

const Dataset& Pipeline::dataset() {
  if (dataset_) return *dataset_;
  if (std::filesystem::exists(paths_.corpus() / "manifest.json")) {
    Dataset ds = load_dataset(paths_.corpus());
    if (ds.config == config_.gen) {
      dataset_ = std::move(ds);
      return *dataset_;
    }
    log("corpus on disk was made with another config; regenerating");
  }
  gen_data();
  return *dataset_;
}

TrainResult Pipeline::train_base_model() {
  const Dataset& ds = dataset();
  log("training base model: " + std::to_string(expected_parameter_count(config_.model)) + " parameters");
  TrainResult r = train_base(init_model(config_.model), ds, config_.train, [&](std::size_t epoch, double loss, double val) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "epoch %zu loss %.4f val_en %.4f", epoch, loss, val);
    log(buf);
  });
  nlohmann::json meta = {{"stage", "base"},
                         {"config_hash", hash_},
                         {"base_hash", base_hash(config_)},
                         {"best_epoch", r.best_epoch}};
  std::error_code ec;
  std::filesystem::create_directories(paths_.root, ec);
  write_file_atomic(paths_.base_checkpoint(), encode_checkpoint(r.model, PatchBank(config_.model.d_model), meta));
  nlohmann::json curve = {{"config_hash", hash_}, {"val_accuracy_en", r.val_accuracy}, {"best_epoch", r.best_epoch}};
  write_file_atomic(paths_.train_curve(), curve.dump(2) + "\n");
  base_ = r.model;
  cache_.reset();
  return r;
}

const Model& Pipeline::base_model() {
  if (base_) return *base_;
  if (std::filesystem::exists(paths_.base_checkpoint())) {
    Checkpoint ck = load_checkpoint(paths_.base_checkpoint());
    if (ck.meta.value("base_hash", std::string()) == base_hash(config_)) {
      base_ = std::move(ck.model);
      return *base_;
    }
    log("base checkpoint on disk was made with another config; retraining");
  }
  train_base_model();
  return *base_;
}

SiteCache& Pipeline::cache() {
  if (cache_) return *cache_;
  const Dataset& ds = dataset();
  const Model& base = base_model();
  cache_ = std::make_unique<SiteCache>(base);
  pool_sequences_ = flatten(ds.train);
  for (LabeledSequence& s : flatten(ds.test)) pool_sequences_.push_back(std::move(s));
  std::vector<const TokenSequence*> all;
  for (const LabeledSequence& s : pool_sequences_) all.push_back(&s.tokens);
  for (const EditExample& e : ds.edit) {
    all.push_back(&e.english);
    for (const auto& [lang, x] : e.parallels) all.push_back(&x);
    for (const TokenSequence& x : e.rephrases) all.push_back(&x);
  }
  cache_->warm(all, config_.threads);
  pool_.clear();
  for (const LabeledSequence& s : pool_sequences_) pool_.push_back(&cache_->get(s.tokens));
  return *cache_;
}

std::span<const EditSiteCache* const> Pipeline::memory_pool() {
  cache();
  return pool_;
}

EvalSets Pipeline::eval_sets(std::span<const EditExample> d_edit) {
  const Dataset& ds = dataset();
  const std::uint64_t seed = sub_seeds(config_.seed).locality;
  return {d_edit, locality_train_sample(ds.train, config_.locality_fraction, seed), flatten_english(ds.test),
          config_.gen.languages, seed};
}

EditConfig Pipeline::edit_config(EditMethod method) const {
  EditConfig ec;
  ec.method = method;
  ec.language_list = non_english(config_.gen.n_languages());
  ec.loss = config_.patch;
  ec.finetune = config_.finetune;
  ec.train_on_all_languages = config_.train_on_all_languages;
  ec.seed = sub_seeds(config_.seed).edit;
  return ec;
}

EditOutcome Pipeline::edit(EditMethod method) {
  const Dataset& ds = dataset();
  const Model& base = base_model();
  SiteCache& c = cache();
  log("editing with " + method_label(method));
  EditOutcome out = run_edit(base, ds.edit, edit_config(method), c, memory_pool(), config_.gen.languages);
  const std::string flag = method_flag(method);
  nlohmann::json meta = {{"stage", "edit"},
                         {"config_hash", hash_},
                         {"base_hash", base_hash(config_)},
                         {"method", method_label(method)}};
  write_file_atomic(paths_.edit_checkpoint(flag), encode_checkpoint(out.edited.model, out.edited.bank, meta));
  nlohmann::json report = edit_report_json(out.report);
  report["config_hash"] = hash_;
  write_file_atomic(paths_.edit_report(flag), report.dump(2) + "\n");
  log(method_label(method) + ": " + std::to_string(out.report.patch_count) + " patches");
  return out;
}

MetricsReport Pipeline::eval_checkpoint(const std::filesystem::path& checkpoint) {
  const Dataset& ds = dataset();
  Checkpoint ck = load_checkpoint(checkpoint);
  if (ck.model.config().vocab_size != config_.model.vocab_size) {
    throw ValidationError("checkpoint " + checkpoint.string() + " does not match the corpus vocabulary");
  }
  const std::string stage = ck.meta.value("stage", std::string());
  const std::string method = stage == "edit" ? ck.meta.value("method", std::string("Edited")) : "Original";
  EditedModel edited{ck.model, ck.bank};
  SiteCache c(edited.model);
  EvalSets sets = eval_sets(ds.edit);
  std::vector<const TokenSequence*> all;
  for (const EditExample& e : ds.edit) {
    all.push_back(&e.english);
    for (const auto& [lang, x] : e.parallels) all.push_back(&x);
    for (const TokenSequence& x : e.rephrases) all.push_back(&x);
  }
  for (const LabeledSequence& s : sets.train_sample) all.push_back(&s.tokens);
  for (const LabeledSequence& s : sets.test) all.push_back(&s.tokens);
  c.warm(all, config_.threads);
  MetricsReport r = evaluate(method, edited.bank.size(), make_predictor(edited, c), sets);
  const std::vector<MetricsReport> rows = {r};
  emit(rows, paths_.reports() / ("eval-" + checkpoint.stem().string()), hash_);
  return r;
}

std::vector<MetricsReport> Pipeline::run_methods(std::span<const EditExample> d_edit, bool save) {
  const Model& base = base_model();
  SiteCache& c = cache();
  const EvalSets sets = eval_sets(d_edit);
  std::vector<MetricsReport> rows;
  const EditedModel original{base, PatchBank(config_.model.d_model)};
  rows.push_back(evaluate("Original", 0, make_predictor(original, c), sets));
  for (const std::string& flag : config_.methods) {
    const EditMethod m = parse_method(flag);
    EditOutcome out;
    if (save) {
      out = edit(m);
    } else {
      log("editing with " + method_label(m));
      out = run_edit(base, d_edit, edit_config(m), c, memory_pool(), config_.gen.languages);
    }
    MetricsReport r = evaluate(method_label(m), out.report.patch_count, make_predictor(out.edited, c), sets);
    r.edit_seed = out.report.seed;
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<MetricsReport> Pipeline::reproduce() {
  gen_data();
  train_base_model();
  std::vector<MetricsReport> rows = run_methods(dataset().edit, true);
  emit(rows, paths_.reports() / "table1", hash_);
  return rows;
}

std::vector<MetricsReport> Pipeline::error_set() {
  const Dataset& ds = dataset();
  const Model& base = base_model();
  SiteCache& c = cache();
  const EditedModel original{base, PatchBank(config_.model.d_model)};
  const std::vector<EditExample> chosen = error_set_select(make_predictor(original, c), ds.edit, config_.gen.n_languages());
  log("error set: " + std::to_string(chosen.size()) + " of " + std::to_string(ds.edit.size()) + " edit examples");
  if (chosen.empty()) throw ValidationError("the base model gets no edit example wrong in every language");
  nlohmann::json ids = nlohmann::json::array();
  for (const EditExample& e : chosen) ids.push_back(e.id);
  write_file_atomic(paths_.reports() / "error_set_ids.json",
                    nlohmann::json{{"config_hash", hash_}, {"ids", ids}}.dump(2) + "\n");
  std::vector<MetricsReport> rows = run_methods(chosen, false);
  emit(rows, paths_.reports() / "error_set", hash_);
  return rows;
}

}  // namespace patchforge
