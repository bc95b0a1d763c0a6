#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "patchforge/corpus.hpp"
#include "patchforge/errors.hpp"

using namespace patchforge;

namespace {

GenConfig small_config() {
  GenConfig g;
  g.n_facts = 1000;
  return g;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("patchforge-test-" + name);
  std::filesystem::remove_all(p);
  return p;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("split sizes follow the ratios") {
  const Dataset ds = generate_corpus(small_config());
  CHECK(ds.train.size() == 800);
  CHECK(ds.val.size() == 100);
  CHECK(ds.edit.size() == 100);
  CHECK(ds.test.size() == 100);
}

TEST_CASE("generation is deterministic") {
  const GenConfig g = small_config();
  CHECK(generate_corpus(g) == generate_corpus(g));
  const auto a = temp_dir("det-a"), b = temp_dir("det-b");
  CHECK(save_dataset(generate_corpus(g), a) == save_dataset(generate_corpus(g), b));
  CHECK(read_file(a / "dataset.jsonl") == read_file(b / "dataset.jsonl"));
  GenConfig other = g;
  other.seed = g.seed + 1;
  CHECK_FALSE(generate_corpus(other) == generate_corpus(g));
}

TEST_CASE("claims are labelled by the fact table") {
  GenConfig g = small_config();
  g.exception_rate = 0.0;
  const Dataset ds = generate_corpus(g);
  const Vocabulary vocab(g);
  const std::size_t n_e = g.n_entities, n_r = g.n_relations, n_o = g.n_attributes * g.values_per_attribute;
  // Without exceptions every entity of a type shares one true value per attribute.
  std::map<std::pair<std::size_t, std::size_t>, std::set<std::size_t>> supported, refuted;
  for (Split s : {Split::kTrain, Split::kVal, Split::kEdit, Split::kTest}) {
    for (const EditExample& ex : ds.split(s)) {
      const auto content = decode_content(vocab, ex.english);
      REQUIRE(content.size() == 4);
      const std::size_t type = content[0] - n_e - n_r - n_o;
      const std::size_t relation = content[2] - n_e;
      const std::size_t object = content[3] - n_e - n_r;
      const std::size_t attribute = object / g.values_per_attribute;
      CHECK(attribute == relation % g.n_attributes);
      (ex.label == 0 ? supported : refuted)[{type, attribute}].insert(object % g.values_per_attribute);
    }
  }
  for (const auto& [key, values] : supported) {
    CHECK(values.size() == 1);
    for (std::size_t v : refuted[key]) CHECK(values.count(v) == 0);
  }
}

TEST_CASE("splits are disjoint by fact") {
  const GenConfig g = small_config();
  const Dataset ds = generate_corpus(g);
  const Vocabulary vocab(g);
  std::set<std::uint64_t> ids;
  std::set<std::pair<std::size_t, std::size_t>> facts;
  std::size_t total = 0;
  for (Split s : {Split::kTrain, Split::kVal, Split::kEdit, Split::kTest}) {
    for (const EditExample& ex : ds.split(s)) {
      ++total;
      ids.insert(ex.id);
      const auto c = decode_content(vocab, ex.english);
      facts.insert({c[1], c[2]});
      CHECK(ex.split == s);
    }
  }
  CHECK(ids.size() == total);
  CHECK(facts.size() == total);
}

TEST_CASE("edit and test examples carry every language; parallels share the fact") {
  const GenConfig g = small_config();
  const Dataset ds = generate_corpus(g);
  const Vocabulary vocab(g);
  for (const auto* split : {&ds.edit, &ds.test}) {
    for (const EditExample& ex : *split) {
      CHECK(ex.parallels.size() == g.n_languages() - 1);
      for (const auto& [lang, x] : ex.parallels) {
        CHECK(vocab.to_english(x, lang) == ex.english);
        CHECK(decode_content(vocab, x) == decode_content(vocab, ex.english));
      }
    }
  }
  for (const EditExample& ex : ds.edit) CHECK(ex.rephrases.size() == g.rephrases_per_example);
}

TEST_CASE("training languages follow the resource weights") {
  GenConfig g;
  const Dataset ds = generate_corpus(g);
  std::vector<double> share(g.n_languages(), 0.0);
  for (const EditExample& ex : ds.train)
    for (const auto& [lang, x] : ex.parallels) share[lang] += 1.0 / static_cast<double>(ds.train.size());
  for (std::size_t l = 1; l < g.n_languages(); ++l) {
    CHECK(std::abs(share[l] - g.resource_weights[l]) <= 0.04);
  }
}

TEST_CASE("language mapping") {
  const GenConfig g = small_config();
  const Vocabulary vocab(g);
  const Dataset ds = generate_corpus(g);
  const TokenSequence& en = ds.edit.front().english;
  CHECK(vocab.to_language(en, 0) == en);
  for (std::size_t l = 1; l < g.n_languages(); ++l) CHECK(vocab.to_english(vocab.to_language(en, l), l) == en);

  // Injective over every English token.
  for (std::size_t l = 0; l < g.n_languages(); ++l) {
    std::set<int> seen;
    std::size_t n = 0;
    for (std::size_t local = 0; local < g.tokens_per_language; ++local) {
      TokenSequence one{{kClsToken, vocab.token(0, local)}};
      const TokenSequence mapped = vocab.to_language(one, l);
      seen.insert(mapped.ids[1]);
      CHECK(vocab.language_of(mapped.ids[1]) == l);
      ++n;
    }
    CHECK(seen.size() == n);
  }
  TokenSequence foreign{{kClsToken, vocab.token(2, 0)}};
  CHECK_THROWS_AS(vocab.to_language(foreign, 1), DataError);
  TokenSequence outside{{kClsToken, static_cast<int>(vocab.size())}};
  CHECK_THROWS_AS(vocab.to_language(outside, 1), DataError);
}

TEST_CASE("rephrases keep content and usually differ") {
  const GenConfig g = small_config();
  const Vocabulary vocab(g);
  const Dataset ds = generate_corpus(g);
  const TokenSequence& en = ds.edit.front().english;
  std::size_t same = 0;
  for (std::uint64_t s = 0; s < 1000; ++s) {
    Rng rng(s);
    const TokenSequence r = make_rephrase(vocab, g, en, rng);
    CHECK(decode_content(vocab, r) == decode_content(vocab, en));
    CHECK(r.ids.front() == kClsToken);
    same += r == en;
  }
  CHECK(same <= 10);
}

TEST_CASE("save and load round trip") {
  const GenConfig g = small_config();
  const Dataset ds = generate_corpus(g);
  const auto dir = temp_dir("roundtrip");
  const std::string hash = save_dataset(ds, dir);
  const Dataset back = load_dataset(dir);
  CHECK(back == ds);
  CHECK(back.config == g);
  CHECK(hash == content_hash(read_file(dir / "dataset.jsonl")));
}

TEST_CASE("load reports a missing parallels field by example") {
  const Dataset ds = generate_corpus(small_config());
  const auto dir = temp_dir("missing");
  save_dataset(ds, dir);
  std::ifstream in(dir / "dataset.jsonl");
  std::string line, out;
  bool dropped = false;
  std::uint64_t victim = 0;
  while (std::getline(in, line)) {
    nlohmann::json j = nlohmann::json::parse(line);
    if (!dropped && j["split"] == "edit") {
      j.erase("parallels");
      victim = j["id"].get<std::uint64_t>();
      dropped = true;
    }
    out += j.dump() + "\n";
  }
  in.close();
  std::ofstream(dir / "dataset.jsonl", std::ios::binary) << out;
  try {
    load_dataset(dir);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("parallels") != std::string::npos);
    CHECK(msg.find(std::to_string(victim)) != std::string::npos);
  }
}

TEST_CASE("malformed lines report their line number") {
  const Dataset ds = generate_corpus(small_config());
  const auto dir = temp_dir("malformed");
  save_dataset(ds, dir);
  std::ifstream in(dir / "dataset.jsonl");
  std::string first, second, rest, line;
  std::getline(in, first);
  std::getline(in, second);
  while (std::getline(in, line)) rest += line + "\n";
  in.close();
  std::ofstream(dir / "dataset.jsonl", std::ios::binary) << first << "\n{\"id\": 1}\n" << rest;
  try {
    load_dataset(dir);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
}

TEST_CASE("invalid generator configs") {
  GenConfig g;
  g.split_ratios = {0.8, 0.1, 0.2};
  CHECK_THROWS_AS(generate_corpus(g), ValidationError);
  g = GenConfig{};
  g.n_facts = g.n_entities * g.n_relations;
  CHECK_THROWS_AS(generate_corpus(g), ValidationError);
  g = GenConfig{};
  g.resource_weights = {0.5, 1.0, 0.5, 0.5, 0.15, 0.05};
  CHECK_THROWS_AS(generate_corpus(g), ValidationError);
}

TEST_CASE("NLI mode has three labels and no rephrases") {
  GenConfig g = small_config();
  g.nli_mode = true;
  const Dataset ds = generate_corpus(g);
  std::set<std::size_t> labels;
  for (const EditExample& ex : ds.train) labels.insert(ex.label);
  CHECK(labels == std::set<std::size_t>{0, 1, 2});
  for (const EditExample& ex : ds.edit) CHECK(ex.rephrases.empty());
  CHECK(label_name(2, true) != label_name(0, true));
  CHECK(parse_label(label_name(1, true), true) == 1);
}
