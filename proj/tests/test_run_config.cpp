#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "patchforge/errors.hpp"
#include "patchforge/json_io.hpp"
#include "patchforge/run_config.hpp"

using namespace patchforge;

namespace {

std::filesystem::path write_config(const std::string& name, const nlohmann::json& j) {
  const auto p = std::filesystem::temp_directory_path() / ("patchforge-test-" + name + ".json");
  std::ofstream(p) << j.dump(2);
  return p;
}

}  // namespace

TEST_CASE("run config json round trip") {
  RunConfig c;
  c.seed = 99;
  c.patch.lambda_mem = 2.5;
  c.methods = {"t-patcher"};
  CHECK(run_config_from_json(run_config_json(c)) == c);
}

TEST_CASE("missing keys keep defaults; missing patch keys keep the tuned values") {
  const RunConfig c = run_config_from_json(nlohmann::json{{"patch", {{"margin", 2.0}}}});
  CHECK(c.patch.margin == 2.0);
  PatchLossConfig tuned = RunConfig::tuned_patch_defaults();
  tuned.margin = 2.0;
  CHECK(c.patch == tuned);
  CHECK(c.gen == GenConfig{});
}

TEST_CASE("unknown keys are rejected by path") {
  try {
    run_config_from_json(nlohmann::json{{"patch", {{"lamda_mem", 1.0}}}});
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("patch.lamda_mem") != std::string::npos);
  }
  CHECK_THROWS_AS(run_config_from_json(nlohmann::json{{"bogus", 1}}), ValidationError);
  CHECK_THROWS_AS(run_config_from_json(nlohmann::json{{"seed", "abc"}}), ValidationError);
}

TEST_CASE("dotted overrides") {
  nlohmann::json j = run_config_json(RunConfig{});
  apply_override(j, "patch.lambda_mem=3");
  apply_override(j, "work_dir=/tmp/x");
  apply_override(j, "gen.languages=[\"en\",\"de\"]");
  const RunConfig c = run_config_from_json(j);
  CHECK(c.patch.lambda_mem == 3.0);
  CHECK(c.work_dir == "/tmp/x");
  CHECK(c.gen.languages == std::vector<std::string>{"en", "de"});
  CHECK_THROWS_AS(apply_override(j, "no-equals"), ValidationError);
  CHECK_THROWS_AS(apply_override(j, "patch..x=1"), ValidationError);
}

TEST_CASE("sub-seeds derive from the global seed") {
  RunConfig a, b;
  a.seed = 1;
  b.seed = 2;
  const RunConfig ra = a.resolved(), rb = b.resolved();
  CHECK(ra.gen.seed != rb.gen.seed);
  CHECK(ra.model.seed != rb.model.seed);
  CHECK(ra.gen.seed == a.resolved().gen.seed);
  CHECK(ra.model.vocab_size == a.gen.vocab_size());
  const SubSeeds s = sub_seeds(7);
  CHECK(s.corpus != s.model_init);
  CHECK(s.edit != s.locality);
}

TEST_CASE("load_run_config applies overrides and the seed variable") {
  const auto path = write_config("load", nlohmann::json{{"seed", 5}, {"work_dir", "w"}});
  ::unsetenv("PATCHFORGE_SEED");
  CHECK(load_run_config(path).seed == 5);
  CHECK(load_run_config(path, {"seed=6"}).seed == 6);
  ::setenv("PATCHFORGE_SEED", "123", 1);
  CHECK(load_run_config(path, {"seed=6"}).seed == 123);
  ::setenv("PATCHFORGE_SEED", "12x", 1);
  CHECK_THROWS_AS(load_run_config(path), ValidationError);
  ::unsetenv("PATCHFORGE_SEED");
  CHECK_THROWS_AS(load_run_config(path, {"methods=[\"rome\"]"}), ValidationError);
  CHECK_THROWS_AS(load_run_config("/nonexistent.json"), IoError);
  const auto bad = std::filesystem::temp_directory_path() / "patchforge-test-bad.json";
  std::ofstream(bad) << "{ not json";
  CHECK_THROWS_AS(load_run_config(bad), ValidationError);
}

TEST_CASE("config hash ignores where artifacts go") {
  RunConfig a, b;
  b.work_dir = "elsewhere";
  b.threads = 3;
  CHECK(config_hash(a) == config_hash(b));
  b.patch.lambda_mem = 1.0;
  CHECK(config_hash(a) != config_hash(b));
  CHECK(config_hash(a).size() == 16);
}

TEST_CASE("shipped default config parses to the built-in defaults") {
  const RunConfig c = load_run_config(PATCHFORGE_SOURCE_DIR "/configs/default.json");
  RunConfig d;
  d.work_dir = c.work_dir;
  CHECK(c == d);
}
