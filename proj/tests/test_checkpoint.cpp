#include <filesystem>

#include "doctest.h"
#include "helpers.hpp"
#include "patchforge/checkpoint.hpp"
#include "patchforge/errors.hpp"

using namespace patchforge;

namespace {

PatchBank random_bank(Rng& rng, std::size_t d, std::size_t n) {
  PatchBank bank(1);
  for (std::uint64_t i = 0; i < n; ++i) {
    Patch p = testutil::random_patch(rng, d, i, rng.normal());
    p.origin_example_id = 1000 + i;
    bank.add(p);
  }
  return bank;
}

}  // namespace

TEST_CASE("checkpoint round trip is bit exact") {
  const ModelConfig c = testutil::toy_config();
  const Model m = init_model(c);
  Rng rng(4);
  const PatchBank bank = random_bank(rng, c.d_model, 5);
  const nlohmann::json meta = {{"config_hash", "0123456789abcdef"}, {"stage", "edit"}};
  const std::string bytes = encode_checkpoint(m, bank, meta);
  CHECK(bytes.substr(0, 4) == "PFG1");
  const Checkpoint back = decode_checkpoint(bytes);
  CHECK(back.model == m);
  CHECK(back.model.config() == c);
  CHECK(back.bank == bank);
  CHECK(back.meta == meta);
  CHECK(encode_checkpoint(back.model, back.bank, back.meta) == bytes);

  const auto path = std::filesystem::temp_directory_path() / "patchforge-test.pfg";
  save_checkpoint(path, m, bank, meta);
  const Checkpoint loaded = load_checkpoint(path);
  CHECK(loaded.model == m);
  CHECK(loaded.bank == bank);
}

TEST_CASE("appending patches leaves earlier patch bytes alone") {
  const ModelConfig c = testutil::toy_config();
  const Model m = init_model(c);
  Rng rng(5);
  PatchBank bank = random_bank(rng, c.d_model, 3);
  const std::string before = encode_checkpoint(m, bank, {});
  bank.add(testutil::random_patch(rng, c.d_model, 3));
  const std::string after = encode_checkpoint(m, bank, {});
  // Same prefix up to the patch count, same bytes for the first three patches.
  const std::size_t patch_bytes = 8 + 8 + 8 + 2 * 8 * c.d_model;
  const std::size_t count_at = before.size() - 3 * patch_bytes - 8;
  CHECK(before.substr(0, count_at) == after.substr(0, count_at));
  CHECK(before.substr(count_at + 8) == after.substr(count_at + 8, 3 * patch_bytes));
}

TEST_CASE("unfrozen patches and corrupt files are rejected") {
  const ModelConfig c = testutil::toy_config();
  const Model m = init_model(c);
  PatchBank bank(1);
  Patch p;
  p.key.assign(c.d_model, 0.0);
  p.value.assign(c.d_model, 0.0);
  bank.add(p);
  CHECK_THROWS_AS(encode_checkpoint(m, bank, {}), SequencingError);
  bank.freeze();
  std::string bytes = encode_checkpoint(m, bank, {});
  CHECK_THROWS(decode_checkpoint("XXXX" + bytes.substr(4)));
  CHECK_THROWS(decode_checkpoint(bytes.substr(0, bytes.size() - 3)));
  CHECK_THROWS_AS(load_checkpoint("/nonexistent/dir/x.pfg"), IoError);
}
