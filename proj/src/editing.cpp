#include "patchforge/editing.hpp"

#include <chrono>

#include "patchforge/errors.hpp"

namespace patchforge {

std::string method_flag(EditMethod m) {
  switch (m) {
    case EditMethod::kFineTune: return "fine-tune";
    case EditMethod::kTPatcher: return "t-patcher";
    case EditMethod::kMpnOnly: return "mpn-only";
    case EditMethod::kMpnAll: return "mpn-all";
  }
  return "t-patcher";
}

std::string method_label(EditMethod m) {
  switch (m) {
    case EditMethod::kFineTune: return "Fine-tuning";
    case EditMethod::kTPatcher: return "T-patcher";
    case EditMethod::kMpnOnly: return "MPN(only)";
    case EditMethod::kMpnAll: return "MPN(all)";
  }
  return "T-patcher";
}

EditMethod parse_method(const std::string& flag) {
  for (EditMethod m : {EditMethod::kFineTune, EditMethod::kTPatcher, EditMethod::kMpnOnly, EditMethod::kMpnAll}) {
    if (method_flag(m) == flag) return m;
  }
  throw ValidationError("unknown edit method '" + flag + "' (expected fine-tune, t-patcher, mpn-only or mpn-all)");
}

bool is_patch_method(EditMethod m) { return m != EditMethod::kFineTune; }

void EditConfig::validate() const {
  loss.validate();
  if ((method == EditMethod::kMpnOnly || method == EditMethod::kMpnAll) && language_list.empty()) {
    throw ValidationError("MPN methods need a nonempty language_list");
  }
  for (std::size_t l : language_list) {
    if (l == 0) throw ValidationError("language_list must not contain English");
  }
  if (!(finetune.learning_rate > 0.0)) throw ValidationError("finetune.learning_rate must be positive");
}

ParallelDraw sample_parallel(const EditExample& example, Rng& rng, std::span<const std::size_t> language_list) {
  if (language_list.empty()) throw ValidationError("sample_parallel: empty language list");
  const std::size_t lang = language_list[static_cast<std::size_t>(rng.below(language_list.size()))];
  return {lang, &example.input(lang)};
}

TriggerPolicy trigger_policy(EditMethod m, std::size_t n_languages, std::optional<std::size_t> sampled) {
  TriggerPolicy p;
  switch (m) {
    case EditMethod::kFineTune:
    case EditMethod::kTPatcher:
      p.languages = {0};
      break;
    case EditMethod::kMpnOnly:
      if (!sampled) throw ValidationError("MPN(only) trigger needs the sampled language");
      p.languages = {0, *sampled};
      break;
    case EditMethod::kMpnAll:
      for (std::size_t l = 0; l < n_languages; ++l) p.languages.push_back(l);
      break;
  }
  return p;
}

EditDecision needs_edit(const Predictor& predict, const EditExample& example, const TriggerPolicy& policy) {
  EditDecision d;
  for (std::size_t lang : policy.languages) {
    if (predict(example.input(lang)) != example.label) d.mispredicted.push_back(lang);
  }
  d.needed = !d.mispredicted.empty();
  return d;
}

nlohmann::json edit_report_json(const EditReport& report) {
  nlohmann::json records = nlohmann::json::array();
  for (const EditRecord& r : report.records) {
    nlohmann::json j = {{"id", r.id},
                        {"triggered", r.triggered},
                        {"mispredicted_languages", r.mispredicted_languages},
                        {"sampled_language", r.sampled_language ? nlohmann::json(*r.sampled_language) : nlohmann::json()},
                        {"steps", r.steps},
                        {"success", r.success}};
    records.push_back(std::move(j));
  }
  return {{"method", report.method},
          {"seed", report.seed},
          {"patch_count", report.patch_count},
          {"records", std::move(records)},
          {"wall_seconds", report.wall_seconds}};
}

Predictor make_predictor(const EditedModel& edited, SiteCache& cache) {
  return [&edited, &cache](const TokenSequence& x) {
    const PatchBank* bank = edited.bank.empty() ? nullptr : &edited.bank;
    return argmax(logits_from_site(edited.model, cache.get(x), bank));
  };
}

namespace {

std::vector<std::string> language_names(const std::vector<std::size_t>& langs, const std::vector<std::string>& roster) {
  std::vector<std::string> out;
  for (std::size_t l : langs) out.push_back(l < roster.size() ? roster[l] : std::to_string(l));
  return out;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

EditOutcome sequential_edit(const Model& model, std::span<const EditExample> d_edit, const EditConfig& config,
                            SiteCache& cache, std::span<const EditSiteCache* const> memory_pool,
                            const std::vector<std::string>& roster) {
  if (!is_patch_method(config.method)) throw ValidationError("sequential_edit needs a patch method");
  config.validate();
  const auto t0 = std::chrono::steady_clock::now();
  EditOutcome out{{model, PatchBank(model.config().n_layers - 1)}, {}};
  out.report.method = method_label(config.method);
  out.report.seed = config.seed;
  const Predictor predict = make_predictor(out.edited, cache);
  Rng sampler(derive_seed(config.seed, "parallel-sampler"));
  Rng patch_rng(derive_seed(config.seed, "patch-training"));
  const bool mpn = config.method != EditMethod::kTPatcher;
  const Vector center = memory_center(memory_pool, config.loss);

  for (const EditExample& ex : d_edit) {
    EditRecord rec;
    rec.id = ex.id;
    std::optional<ParallelDraw> draw;
    if (mpn) {
      draw = sample_parallel(ex, sampler, config.language_list);
      rec.sampled_language = roster.at(draw->language);
    }
    const TriggerPolicy policy = trigger_policy(config.method, roster.size(),
                                                draw ? std::optional<std::size_t>(draw->language) : std::nullopt);
    const EditDecision decision = needs_edit(predict, ex, policy);
    rec.triggered = decision.needed;
    rec.mispredicted_languages = language_names(decision.mispredicted, roster);
    if (decision.needed) {
      std::vector<EditInput> batch = {{&cache.get(ex.english), ex.label}};
      if (config.method == EditMethod::kMpnAll && config.train_on_all_languages) {
        for (std::size_t l = 1; l < roster.size(); ++l) batch.push_back({&cache.get(ex.input(l)), ex.label});
      } else if (draw) {
        batch.push_back({&cache.get(*draw->input), ex.label});
      }
      out.edited.bank.add(new_patch(model, out.edited.bank, batch, ex.id, config.loss, patch_rng, center));
      const PatchTrainStats stats = train_patch(model, out.edited.bank, batch, memory_pool, config.loss, patch_rng);
      rec.steps = stats.steps;
      rec.success = stats.success;
    }
    out.report.records.push_back(std::move(rec));
  }
  out.report.patch_count = out.edited.bank.size();
  out.report.wall_seconds = seconds_since(t0);
  return out;
}

namespace {

// Cross-entropy of the English example with the last FFN trainable.
double finetune_loss(const Model& model, const EditSiteCache& site, std::size_t label, GradStore* grads,
                     bool* correct) {
  Tape tape(grads);
  const EncoderLayer& l = model.editable_layer();
  const auto ids = model.editable_ffn_ids();
  Var keys = tape.parameter(ids[0], l.ffn_keys);
  Var key_bias = tape.parameter(ids[1], l.ffn_key_bias);
  Var values = tape.parameter(ids[2], l.ffn_values);
  Var value_bias = tape.parameter(ids[3], l.ffn_value_bias);
  Var q0 = tape.slice_rows(tape.constant_ref(site.ffn_input), 0, 1);
  Var hidden = tape.gelu(tape.add_row(tape.matmul(q0, keys), key_bias));
  Var ffn = tape.add_row(tape.matmul(hidden, values), value_bias);
  Var out = tape.add(tape.slice_rows(tape.constant_ref(site.residual), 0, 1), ffn);
  Var logits = build_head(model, tape, out);
  Var loss = tape.cross_entropy(logits, label);
  if (correct != nullptr) *correct = argmax(tape.value(logits).data()) == label;
  if (grads != nullptr) tape.backward(loss);
  return tape.scalar(loss);
}

}  // namespace

EditOutcome finetune_baseline(const Model& model, std::span<const EditExample> d_edit, const EditConfig& config,
                              SiteCache& cache, const std::vector<std::string>& roster) {
  config.validate();
  const auto t0 = std::chrono::steady_clock::now();
  EditOutcome out{{model, PatchBank(model.config().n_layers - 1)}, {}};
  out.report.method = method_label(EditMethod::kFineTune);
  out.report.seed = config.seed;
  Model& m = out.edited.model;
  std::vector<ParamSlot> all = m.parameters();
  std::vector<ParamSlot> slots;
  for (ParamId id : m.editable_ffn_ids()) slots.push_back(all[id]);
  const Predictor predict = make_predictor(out.edited, cache);
  const TriggerPolicy policy = trigger_policy(EditMethod::kFineTune, roster.size(), std::nullopt);

  for (const EditExample& ex : d_edit) {
    EditRecord rec;
    rec.id = ex.id;
    const EditDecision decision = needs_edit(predict, ex, policy);
    rec.triggered = decision.needed;
    rec.mispredicted_languages = language_names(decision.mispredicted, roster);
    if (decision.needed) {
      const EditSiteCache& site = cache.get(ex.english);
      GradStore grads;
      for (const ParamSlot& s : slots) grads.register_param(s.id, s.value->rows(), s.value->cols());
      AdamW opt(AdamWConfig{config.finetune.learning_rate, 0.9, 0.999, 1e-8, 0.0, 0});
      for (std::size_t step = 0;; ++step) {
        grads.zero();
        bool correct = false;
        finetune_loss(m, site, ex.label, &grads, &correct);
        rec.steps = step;
        if (correct) {
          rec.success = true;
          break;
        }
        if (step == config.finetune.max_steps) break;
        opt.step(slots, grads);
      }
    }
    out.report.records.push_back(std::move(rec));
  }
  out.report.wall_seconds = seconds_since(t0);
  return out;
}

EditOutcome run_edit(const Model& model, std::span<const EditExample> d_edit, const EditConfig& config,
                     SiteCache& cache, std::span<const EditSiteCache* const> memory_pool,
                     const std::vector<std::string>& roster) {
  if (config.method == EditMethod::kFineTune) return finetune_baseline(model, d_edit, config, cache, roster);
  return sequential_edit(model, d_edit, config, cache, memory_pool, roster);
}

}  // namespace patchforge
