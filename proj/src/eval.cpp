#include "patchforge/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "patchforge/errors.hpp"
#include "patchforge/random.hpp"

namespace patchforge {

double fraction_correct(std::span<const std::size_t> predicted, std::span<const std::size_t> labels) {
  if (predicted.size() != labels.size()) throw ShapeError("fraction_correct: prediction/label count mismatch");
  if (predicted.empty()) throw ValidationError("metric over an empty set");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) hits += predicted[i] == labels[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(predicted.size());
}

namespace {

template <typename Inputs>
double score(const Predictor& predict, const Inputs& inputs) {
  std::vector<std::size_t> predicted, labels;
  for (const auto& [x, y] : inputs) {
    predicted.push_back(predict(*x));
    labels.push_back(y);
  }
  return fraction_correct(predicted, labels);
}

using Pairs = std::vector<std::pair<const TokenSequence*, std::size_t>>;

}  // namespace

double reliability(const Predictor& predict, std::span<const EditExample> d_edit) {
  Pairs in;
  for (const EditExample& e : d_edit) in.emplace_back(&e.english, e.label);
  return score(predict, in);
}

std::optional<double> mlg(const Predictor& predict, std::span<const EditExample> d_edit) {
  Pairs in;
  for (const EditExample& e : d_edit) {
    for (const TokenSequence& r : e.rephrases) in.emplace_back(&r, e.label);
  }
  if (in.empty()) return std::nullopt;
  return score(predict, in);
}

ClgResult clg(const Predictor& predict, std::span<const EditExample> d_edit, const std::vector<std::string>& roster) {
  if (roster.size() < 2) throw ValidationError("clg needs at least one language besides English");
  ClgResult out;
  double total = 0.0;
  for (std::size_t lang = 1; lang < roster.size(); ++lang) {
    Pairs in;
    for (const EditExample& e : d_edit) in.emplace_back(&e.input(lang), e.label);
    const double v = score(predict, in);
    out.per_language.emplace_back(roster[lang], v);
    total += v;
  }
  out.average = total / static_cast<double>(out.per_language.size());
  return out;
}

std::vector<LabeledSequence> locality_train_sample(std::span<const EditExample> d_train, double fraction,
                                                   std::uint64_t seed) {
  if (d_train.empty()) throw ValidationError("locality sample from an empty D_train");
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ValidationError("locality fraction must lie in (0, 1]");
  std::vector<std::size_t> order(d_train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  const auto n = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(d_train.size()))));
  order.resize(n);
  std::sort(order.begin(), order.end());
  std::vector<LabeledSequence> out;
  for (std::size_t i : order) out.push_back({d_train[i].english, d_train[i].label, 0, d_train[i].id});
  return out;
}

LocalityResult locality(const Predictor& predict, std::span<const LabeledSequence> train_sample,
                        std::span<const LabeledSequence> test) {
  auto run = [&](std::span<const LabeledSequence> set) {
    Pairs in;
    for (const LabeledSequence& s : set) in.emplace_back(&s.tokens, s.label);
    return score(predict, in);
  };
  return {run(train_sample), run(test)};
}

std::vector<EditExample> error_set_select(const Predictor& predict, std::span<const EditExample> d_edit,
                                          std::size_t n_languages) {
  std::vector<EditExample> out;
  for (const EditExample& e : d_edit) {
    bool all_wrong = true;
    for (std::size_t lang = 0; lang < n_languages && all_wrong; ++lang) {
      all_wrong = predict(e.input(lang)) != e.label;
    }
    if (all_wrong) out.push_back(e);
  }
  return out;
}

MetricsReport evaluate(const std::string& method, std::size_t patch_count, const Predictor& predict,
                       const EvalSets& sets) {
  MetricsReport r;
  r.method = method;
  r.patch_count = patch_count;
  r.reliability = reliability(predict, sets.d_edit);
  r.mlg = mlg(predict, sets.d_edit);
  const ClgResult c = clg(predict, sets.d_edit, sets.roster);
  r.clg_per_language = c.per_language;
  r.clg_avg = c.average;
  const LocalityResult loc = locality(predict, sets.train_sample, sets.test);
  r.locality_train = loc.train;
  r.locality_test = loc.test;
  r.locality_train_size = sets.train_sample.size();
  r.locality_seed = sets.locality_seed;
  return r;
}

std::string report_csv_header(const std::vector<std::string>& roster) {
  std::string h = "Method,PatchNum,Reliability,MLG";
  for (std::size_t l = 1; l < roster.size(); ++l) h += ",CLG_" + roster[l];
  h += ",CLG_avg,Locality_train,Locality_test";
  return h;
}

namespace {

std::string fixed4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

}  // namespace

std::string report_csv(std::span<const MetricsReport> reports, const std::string& config_hash) {
  if (reports.empty()) throw ValidationError("emit_report: no reports");
  std::vector<std::string> roster = {"en"};
  for (const auto& [lang, v] : reports.front().clg_per_language) roster.push_back(lang);
  std::string out = "# config_hash=" + config_hash + "\n" + report_csv_header(roster) + "\n";
  for (const MetricsReport& r : reports) {
    out += r.method + "," + std::to_string(r.patch_count) + "," + fixed4(r.reliability) + ",";
    out += r.mlg ? fixed4(*r.mlg) : "";
    for (const auto& [lang, v] : r.clg_per_language) out += "," + fixed4(v);
    out += "," + fixed4(r.clg_avg) + "," + fixed4(r.locality_train) + "," + fixed4(r.locality_test) + "\n";
  }
  return out;
}

nlohmann::json report_json(std::span<const MetricsReport> reports, const std::string& config_hash) {
  nlohmann::json rows = nlohmann::json::array();
  for (const MetricsReport& r : reports) {
    nlohmann::json clg_map = nlohmann::json::object();
    for (const auto& [lang, v] : r.clg_per_language) clg_map[lang] = v;
    rows.push_back({{"method", r.method},
                    {"patch_count", r.patch_count},
                    {"reliability", r.reliability},
                    {"mlg", r.mlg ? nlohmann::json(*r.mlg) : nlohmann::json()},
                    {"clg", clg_map},
                    {"clg_avg", r.clg_avg},
                    {"locality_train", r.locality_train},
                    {"locality_test", r.locality_test},
                    {"locality_train_size", r.locality_train_size},
                    {"locality_seed", r.locality_seed},
                    {"edit_seed", r.edit_seed}});
  }
  return {{"config_hash", config_hash}, {"reports", std::move(rows)}};
}

void emit_report(std::span<const MetricsReport> reports, const std::filesystem::path& stem,
                 const std::string& config_hash) {
  const std::string csv = report_csv(reports, config_hash);
  const std::string json = report_json(reports, config_hash).dump(2) + "\n";
  for (const auto& [ext, text] : {std::pair{".csv", &csv}, std::pair{".json", &json}}) {
    std::filesystem::path p = stem;
    p += ext;
    std::ofstream f(p, std::ios::binary);
    if (!f) throw IoError("cannot write report " + p.string());
    f << *text;
    if (!f) throw IoError("failed writing report " + p.string());
  }
}

}  // namespace patchforge
