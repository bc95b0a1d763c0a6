#include <map>
#include <set>

#include "doctest.h"
#include "helpers.hpp"
#include "patchforge/editing.hpp"
#include "patchforge/errors.hpp"

using namespace patchforge;

namespace {

EditExample example_with(std::size_t n_languages, std::size_t label) {
  EditExample ex;
  ex.id = 42;
  ex.label = label;
  ex.english = TokenSequence{{1, 100}};
  for (std::size_t l = 1; l < n_languages; ++l) ex.parallels[l] = TokenSequence{{1, static_cast<int>(100 + l)}};
  return ex;
}

// Predicts the label unless the sequence's second token is listed as wrong.
Predictor wrong_on(std::set<int> wrong, std::size_t label) {
  return [wrong, label](const TokenSequence& x) { return wrong.count(x.ids[1]) ? 1 - label : label; };
}

}  // namespace

TEST_CASE("method names") {
  for (EditMethod m : {EditMethod::kFineTune, EditMethod::kTPatcher, EditMethod::kMpnOnly, EditMethod::kMpnAll}) {
    CHECK(parse_method(method_flag(m)) == m);
  }
  CHECK(method_label(EditMethod::kFineTune) == "Fine-tuning");
  CHECK(method_label(EditMethod::kTPatcher) == "T-patcher");
  CHECK(method_label(EditMethod::kMpnOnly) == "MPN(only)");
  CHECK(method_label(EditMethod::kMpnAll) == "MPN(all)");
  CHECK_THROWS_AS(parse_method("rome"), ValidationError);
  CHECK_FALSE(is_patch_method(EditMethod::kFineTune));
}

TEST_CASE("sample_parallel") {
  const EditExample ex = example_with(6, 0);
  const std::vector<std::size_t> one = {3};
  Rng rng(1);
  for (int i = 0; i < 20; ++i) CHECK(sample_parallel(ex, rng, one).language == 3);

  const std::vector<std::size_t> five = {1, 2, 3, 4, 5};
  std::map<std::size_t, int> counts;
  Rng r(2024);
  for (int i = 0; i < 10000; ++i) {
    const ParallelDraw d = sample_parallel(ex, r, five);
    CHECK(d.input == &ex.parallels.at(d.language));
    ++counts[d.language];
  }
  for (std::size_t l : five) CHECK(std::abs(counts[l] / 10000.0 - 0.20) <= 0.02);

  Rng a(9), b(9);
  CHECK(sample_parallel(ex, a, five).language == sample_parallel(ex, b, five).language);

  EditExample missing = ex;
  missing.parallels.erase(4);
  const std::vector<std::size_t> four = {4};
  try {
    sample_parallel(missing, rng, four);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("42") != std::string::npos);
  }
}

TEST_CASE("trigger policies") {
  CHECK(trigger_policy(EditMethod::kTPatcher, 6, std::nullopt).languages == std::vector<std::size_t>{0});
  CHECK(trigger_policy(EditMethod::kMpnOnly, 6, 4).languages == std::vector<std::size_t>{0, 4});
  CHECK(trigger_policy(EditMethod::kMpnAll, 3, std::nullopt).languages == std::vector<std::size_t>{0, 1, 2});
  CHECK_THROWS_AS(trigger_policy(EditMethod::kMpnOnly, 6, std::nullopt), ValidationError);
}

TEST_CASE("needs_edit") {
  const EditExample ex = example_with(6, 0);
  const auto all_right = wrong_on({}, 0);
  const EditDecision none = needs_edit(all_right, ex, trigger_policy(EditMethod::kMpnAll, 6, std::nullopt));
  CHECK_FALSE(none.needed);
  CHECK(none.mispredicted.empty());

  const auto de_wrong = wrong_on({101}, 0);
  CHECK_FALSE(needs_edit(de_wrong, ex, trigger_policy(EditMethod::kTPatcher, 6, std::nullopt)).needed);
  const EditDecision all = needs_edit(de_wrong, ex, trigger_policy(EditMethod::kMpnAll, 6, std::nullopt));
  CHECK(all.needed);
  CHECK(all.mispredicted == std::vector<std::size_t>{1});
}

TEST_CASE("MPN methods need a language list") {
  EditConfig c;
  c.method = EditMethod::kMpnOnly;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c.language_list = {1};
  CHECK_NOTHROW(c.validate());
}

namespace {

struct ToyEdit {
  ModelConfig config = testutil::toy_config();
  Model model = init_model(config);
  std::vector<EditExample> d_edit;
  std::vector<TokenSequence> pool_inputs;
  std::vector<std::string> roster = {"en", "de", "fr"};

  // Languages are disjoint id ranges: en 3..11, de 12..20, fr 21..29.
  ToyEdit(bool labels_from_model, std::uint64_t seed) {
    config.n_classes = 2;
    model = init_model(config);
    Rng rng(seed);
    for (std::uint64_t i = 0; i < 12; ++i) {
      EditExample ex;
      ex.id = i;
      ex.split = Split::kEdit;
      ex.english.ids = {1};
      const std::size_t len = 3 + rng.below(4);
      for (std::size_t k = 0; k < len; ++k) ex.english.ids.push_back(static_cast<int>(3 + rng.below(9)));
      for (std::size_t l = 1; l < 3; ++l) {
        TokenSequence x = ex.english;
        for (std::size_t k = 1; k < x.ids.size(); ++k) x.ids[k] += static_cast<int>(9 * l);
        ex.parallels[l] = x;
      }
      ex.label = labels_from_model ? predict(model, ex.english) : rng.below(2);
      d_edit.push_back(ex);
    }
    for (int i = 0; i < 40; ++i) pool_inputs.push_back(testutil::random_sequence(rng, config));
  }

  EditOutcome run(EditMethod m, SiteCache& cache, std::vector<const EditSiteCache*>& pool) {
    for (const TokenSequence& x : pool_inputs) pool.push_back(&cache.get(x));
    EditConfig c;
    c.method = m;
    c.language_list = {1, 2};
    c.loss.learning_rate = 0.05;
    c.loss.max_steps = 200;
    c.finetune.learning_rate = 0.05;
    c.seed = 5;
    return run_edit(model, d_edit, c, cache, pool, roster);
  }
};

}  // namespace

TEST_CASE("no triggers means no patches") {
  ToyEdit toy(true, 1);
  SiteCache cache(toy.model);
  std::vector<const EditSiteCache*> pool;
  const EditOutcome out = toy.run(EditMethod::kTPatcher, cache, pool);
  CHECK(out.report.patch_count == 0);
  CHECK(out.edited.bank.empty());
  CHECK(out.edited.model == toy.model);
  for (const EditRecord& r : out.report.records) CHECK_FALSE(r.triggered);

  SiteCache c2(toy.model);
  std::vector<const EditSiteCache*> p2;
  const EditOutcome ft = toy.run(EditMethod::kFineTune, c2, p2);
  CHECK(ft.edited.model == toy.model);
}

TEST_CASE("sequential editing on a toy model") {
  ToyEdit toy(false, 2);
  const Model before = toy.model;
  SiteCache cache(toy.model);
  std::vector<const EditSiteCache*> pool;
  const EditOutcome out = toy.run(EditMethod::kMpnOnly, cache, pool);
  CHECK(out.edited.model == before);
  CHECK(out.report.patch_count == out.edited.bank.size());
  CHECK(out.report.records.size() == toy.d_edit.size());
  std::size_t triggered = 0;
  for (std::size_t i = 0; i < out.report.records.size(); ++i) {
    const EditRecord& r = out.report.records[i];
    CHECK(r.id == toy.d_edit[i].id);
    CHECK(r.sampled_language.has_value());
    if (r.triggered) {
      CHECK_FALSE(r.mispredicted_languages.empty());
      CHECK(out.edited.bank[triggered].origin_example_id == r.id);
      ++triggered;
    }
  }
  CHECK(triggered == out.report.patch_count);
  for (const Patch& p : out.edited.bank.patches()) CHECK(p.frozen);

  // Same seed, same report.
  SiteCache c2(toy.model);
  std::vector<const EditSiteCache*> p2;
  const EditOutcome again = toy.run(EditMethod::kMpnOnly, c2, p2);
  CHECK(again.edited.bank == out.edited.bank);
  nlohmann::json a = edit_report_json(out.report), b = edit_report_json(again.report);
  a.erase("wall_seconds");
  b.erase("wall_seconds");
  CHECK(a == b);
}

TEST_CASE("fine-tuning changes only the last FFN") {
  ToyEdit toy(false, 3);
  SiteCache cache(toy.model);
  std::vector<const EditSiteCache*> pool;
  const EditOutcome out = toy.run(EditMethod::kFineTune, cache, pool);
  CHECK(out.edited.bank.empty());
  Model restored = out.edited.model;
  const EncoderLayer& base_last = toy.model.editable_layer();
  restored.editable_layer().ffn_keys = base_last.ffn_keys;
  restored.editable_layer().ffn_key_bias = base_last.ffn_key_bias;
  restored.editable_layer().ffn_values = base_last.ffn_values;
  restored.editable_layer().ffn_value_bias = base_last.ffn_value_bias;
  CHECK(restored == toy.model);
  CHECK(out.report.patch_count == 0);
}

TEST_CASE("edit report json") {
  EditReport r;
  r.method = "T-patcher";
  r.seed = 3;
  r.patch_count = 1;
  r.records.push_back({7, true, {"en"}, std::nullopt, 12, true});
  const nlohmann::json j = edit_report_json(r);
  CHECK(j["method"] == "T-patcher");
  CHECK(j["patch_count"] == 1);
  CHECK(j["records"][0]["id"] == 7);
  CHECK(j["records"][0]["sampled_language"].is_null());
  CHECK(j.contains("wall_seconds"));
}
