#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "patchforge/errors.hpp"
#include "patchforge/patch_bank.hpp"
#include "patchforge/patching.hpp"

using namespace patchforge;

namespace {

// sigma(qK + b_k)V + b_v with plain loops and the series gelu.
Vector ffn_oracle(const Vector& q, const Matrix& k, const Vector& bk, const Matrix& v, const Vector& bv) {
  Vector out = bv;
  for (std::size_t j = 0; j < k.cols(); ++j) {
    double pre = bk[j];
    for (std::size_t i = 0; i < q.size(); ++i) pre += q[i] * k(i, j);
    const double a = testutil::gelu_oracle(pre);
    for (std::size_t c = 0; c < v.cols(); ++c) out[c] += a * v(j, c);
  }
  return out;
}

struct Toy {
  ModelConfig config = testutil::toy_config();
  Model model = init_model(config);
  std::vector<EditSiteCache> sites;

  explicit Toy(std::size_t n, std::uint64_t seed = 21) {
    Rng rng(seed);
    for (std::size_t i = 0; i < n; ++i) sites.push_back(forward(model, testutil::random_sequence(rng, config)).site);
  }
};

}  // namespace

TEST_CASE("ffn_forward examples") {
  const Vector zero = {0.0, 0.0};
  const Vector out = ffn_forward(std::vector<double>{2, -3}, Matrix::identity(2), zero, Matrix::identity(2), zero);
  CHECK(out[0] == doctest::Approx(1.95450).epsilon(1e-5));
  CHECK(out[1] == doctest::Approx(-0.00405).epsilon(1e-3));
  CHECK(out[0] == doctest::Approx(testutil::gelu_oracle(2.0)).epsilon(1e-12));

  Rng rng(1);
  const Matrix k = testutil::random_matrix(rng, 4, 6), v = testutil::random_matrix(rng, 6, 4);
  const Vector bk = testutil::random_vector(rng, 6), bv = testutil::random_vector(rng, 4);
  CHECK(ffn_forward(Vector(4, 0.0), k, Vector(6, 0.0), v, bv) == bv);
  for (int t = 0; t < 20; ++t) {
    const Vector q = testutil::random_vector(rng, 4);
    const Vector a = ffn_forward(q, k, bk, v, bv), b = ffn_oracle(q, k, bk, v, bv);
    for (int c = 0; c < 4; ++c) CHECK(std::abs(a[c] - b[c]) <= 1e-12);
  }
  CHECK_THROWS_AS(ffn_forward(Vector(3, 0.0), k, bk, v, bv), ShapeError);
}

TEST_CASE("patched_ffn_forward examples") {
  const Matrix zk(2, 2, 0.0), zv(2, 2, 0.0);
  const Vector zb = {0.0, 0.0};
  PatchBank bank;
  Patch p;
  p.key = {1, 0};
  p.bias = 0;
  p.value = {0, 2};
  p.frozen = true;
  bank.add(p);
  const Vector out = patched_ffn_forward(std::vector<double>{1, 0}, zk, zb, zv, zb, bank);
  CHECK(out[0] == 0.0);
  CHECK(out[1] == doctest::Approx(1.682690).epsilon(1e-6));
  CHECK(patch_activation(std::vector<double>{1, 0}, p) == doctest::Approx(0.841345).epsilon(1e-6));

  Rng rng(2);
  const Matrix k = testutil::random_matrix(rng, 3, 5), v = testutil::random_matrix(rng, 5, 3);
  const Vector bk = testutil::random_vector(rng, 5), bv = testutil::random_vector(rng, 3);
  const Vector q = testutil::random_vector(rng, 3);
  CHECK(patched_ffn_forward(q, k, bk, v, bv, PatchBank()) == ffn_forward(q, k, bk, v, bv));
}

TEST_CASE("patch_activation examples") {
  Patch p;
  p.key = {0, 1};
  p.value = {0, 0};
  CHECK(patch_activation(std::vector<double>{1, 0}, p) == 0.0);
  p.key = {2, 0};
  p.bias = -2;
  CHECK(patch_activation(std::vector<double>{1, 0}, p) == 0.0);
  const double r = 1 / std::sqrt(2.0);
  p.key = {r, r};
  p.bias = 0;
  CHECK(patch_activation(std::vector<double>{r, r}, p) == doctest::Approx(testutil::gelu_oracle(1.0)).epsilon(1e-12));
}

TEST_CASE("bank sequencing") {
  PatchBank bank(1);
  Patch a;
  a.key = {1};
  a.value = {1};
  a.id = 0;
  bank.add(a);
  CHECK(bank.has_unfrozen());
  Patch b = a;
  b.id = 1;
  CHECK_THROWS_AS(bank.add(b), SequencingError);
  bank.freeze();
  CHECK_FALSE(bank.has_unfrozen());
  CHECK_THROWS_AS(bank.unfrozen(), SequencingError);
  Patch dup = a;
  CHECK_THROWS_AS(bank.add(dup), SequencingError);
  bank.add(b);
  CHECK(bank.patches().front().id == 0);
  CHECK(bank.patches().back().id == 1);
}

TEST_CASE("new_patch") {
  Toy toy(4);
  const EditInput batch[] = {{&toy.sites[0], 1}};
  PatchLossConfig cfg;
  Rng r1(5), r2(5);
  const PatchBank bank(1);
  CHECK(new_patch(toy.model, bank, batch, 7, cfg, r1) == new_patch(toy.model, bank, batch, 7, cfg, r2));

  cfg.init = "zeros";
  const Patch z = new_patch(toy.model, bank, batch, 7, cfg, r1);
  CHECK(z.value == Vector(toy.config.d_model, 0.0));
  PatchBank with = bank;
  with.add(z);
  for (const EditSiteCache& s : toy.sites) CHECK(logits_from_site(toy.model, s, &with) == logits_from_site(toy.model, s));
  CHECK_THROWS_AS(new_patch(toy.model, with, batch, 8, cfg, r1), SequencingError);

  // Threshold init: pre-activation is the target at the mean and zero at the threshold point.
  cfg = PatchLossConfig{};
  cfg.init = "first";
  cfg.key_noise = 0;
  cfg.target_preactivation = 6;
  cfg.threshold_fraction = 0.6;
  const Vector c = testutil::random_vector(r1, toy.config.d_model, 0.1);
  const Patch t = new_patch(toy.model, bank, batch, 7, cfg, r1, c);
  const auto q0 = toy.sites[0].ffn_input.row(0);
  auto pre = [&](const Vector& q) { return dot(q, t.key) + t.bias; };
  CHECK(pre(Vector(q0.begin(), q0.end())) == doctest::Approx(6.0).epsilon(1e-9));
  Vector mid(c.size());
  for (std::size_t i = 0; i < c.size(); ++i) mid[i] = c[i] + 0.6 * (q0[i] - c[i]);
  CHECK(std::abs(pre(mid)) <= 1e-9);
}

TEST_CASE("patch losses on fixtures") {
  Toy toy(6);
  toy.config.n_classes = 2;
  toy.model = init_model(toy.config);
  Rng rng(8);
  for (auto& s : toy.sites) s = forward(toy.model, testutil::random_sequence(rng, toy.config)).site;
  toy.model.head_weight.fill(0.0);
  toy.model.head_bias.fill(0.0);

  PatchBank bank(1);
  Patch p;
  p.key.assign(toy.config.d_model, 0.0);
  p.value.assign(toy.config.d_model, 0.0);
  p.bias = 0.0;
  bank.add(p);
  PatchLossConfig cfg;
  const EditInput batch[] = {{&toy.sites[0], 0}, {&toy.sites[1], 0}};
  const EditSiteCache* memory[] = {&toy.sites[2], &toy.sites[3]};
  const PatchLosses l = patch_losses(toy.model, bank, batch, memory, cfg);
  CHECK(l.edit == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  CHECK(l.mem == 0.0);
  CHECK(l.act == doctest::Approx(1.0).epsilon(1e-14));  // max(0, 1 - 0)^2

  bank.unfrozen().bias = 3.0;
  const PatchLosses hot = patch_losses(toy.model, bank, batch, memory, cfg);
  CHECK(hot.act == 0.0);
  CHECK(hot.mem == doctest::Approx(testutil::gelu_oracle(3.0) * testutil::gelu_oracle(3.0)).epsilon(1e-12));

  const std::vector<EditInput> none;
  CHECK_THROWS_AS(patch_losses(toy.model, bank, none, memory, cfg), ValidationError);
}

TEST_CASE("total loss is the weighted sum of its parts") {
  Toy toy(8);
  Rng rng(4);
  PatchBank bank(1);
  bank.add(testutil::random_patch(rng, toy.config.d_model, 0, 0.2));
  Patch p = testutil::random_patch(rng, toy.config.d_model, 1, -0.1);
  p.frozen = false;
  bank.add(p);
  PatchLossConfig cfg;
  cfg.lambda_edit = 0.7;
  cfg.lambda_act = 1.3;
  cfg.lambda_mem = 2.9;
  cfg.margin = 2.0;
  const EditInput batch[] = {{&toy.sites[0], 2}, {&toy.sites[1], 1}};
  const EditSiteCache* memory[] = {&toy.sites[2], &toy.sites[3], &toy.sites[4]};
  const PatchLosses l = patch_losses(toy.model, bank, batch, memory, cfg);
  CHECK(std::abs(l.total - (0.7 * l.edit + 1.3 * l.act + 2.9 * l.mem)) <= 1e-12);
  CHECK(l.correct.size() == 2);
  CHECK(l.activation.size() == 2);
}

TEST_CASE("patch loss gradients match finite differences and stay off the base model") {
  Toy toy(10, 31);
  Rng rng(6);
  PatchBank bank(1);
  for (std::uint64_t i = 0; i < 3; ++i) {
    bank.add(testutil::random_patch(rng, toy.config.d_model, i, 0.1));
  }
  Patch p = testutil::random_patch(rng, toy.config.d_model, 3, 0.3);
  p.frozen = false;
  for (double& k : p.key) k *= 0.5;
  bank.add(p);
  PatchLossConfig cfg;
  cfg.margin = 3.0;  // keeps the hinge active
  const EditInput batch[] = {{&toy.sites[0], 1}, {&toy.sites[1], 2}};
  std::vector<const EditSiteCache*> memory;
  for (std::size_t i = 2; i < 10; ++i) memory.push_back(&toy.sites[i]);
  TrainablePatch trainable(bank.unfrozen());
  std::vector<ParamSlot> slots = trainable.slots();
  auto loss = [&](GradStore* g) {
    return patch_losses(toy.model, bank, trainable, batch, memory, cfg, g).total;
  };
  const GradCheckResult r = grad_check(loss, slots, 1e-6);
  CHECK(r.coordinates == 2 * toy.config.d_model + 1);
  CHECK(r.max_relative_error <= 1e-5);

  GradStore g;
  for (const ParamSlot& s : slots) g.register_param(s.id, s.value->rows(), s.value->cols());
  const Model before = toy.model;
  loss(&g);
  CHECK(g.size() == 3);
  for (ParamId id : g.ids()) CHECK(id >= kPatchKeyId);
  CHECK(toy.model == before);
}

TEST_CASE("train_patch stops at once when already satisfied") {
  Toy toy(4);
  const std::size_t label = argmax(logits_from_site(toy.model, toy.sites[0]));
  PatchBank bank(1);
  Patch p;
  p.key.assign(toy.config.d_model, 0.0);
  p.value.assign(toy.config.d_model, 0.0);
  p.bias = 5.0;  // activation gelu(5) > margin everywhere
  bank.add(p);
  PatchLossConfig cfg;
  const EditInput batch[] = {{&toy.sites[0], label}};
  const EditSiteCache* pool[] = {&toy.sites[1]};
  Rng rng(1);
  const PatchTrainStats s = train_patch(toy.model, bank, batch, pool, cfg, rng);
  CHECK(s.steps == 0);
  CHECK(s.success);
  CHECK_FALSE(bank.has_unfrozen());
  CHECK(bank[0].bias == 5.0);
  CHECK_THROWS_AS(train_patch(toy.model, bank, batch, pool, cfg, rng), SequencingError);
}

TEST_CASE("train_patch fits a flipped label on a toy model") {
  Toy toy(40, 77);
  const std::size_t pred = argmax(logits_from_site(toy.model, toy.sites[0]));
  const std::size_t target = (pred + 1) % toy.config.n_classes;
  PatchBank bank(1);
  PatchLossConfig cfg;
  cfg.learning_rate = 0.05;
  const EditInput batch[] = {{&toy.sites[0], target}};
  std::vector<const EditSiteCache*> pool;
  for (std::size_t i = 1; i < toy.sites.size(); ++i) pool.push_back(&toy.sites[i]);
  Rng rng(3);
  bank.add(new_patch(toy.model, bank, batch, 0, cfg, rng, memory_center(pool, cfg)));
  const PatchTrainStats s = train_patch(toy.model, bank, batch, pool, cfg, rng);
  CHECK(s.success);
  CHECK(argmax(logits_from_site(toy.model, toy.sites[0], &bank)) == target);
  CHECK(bank[0].frozen);
}

TEST_CASE("patch loss config validation") {
  PatchLossConfig c;
  c.margin = 0;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = PatchLossConfig{};
  c.lambda_mem = -1;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = PatchLossConfig{};
  c.init = "bogus";
  CHECK_THROWS_AS(c.validate(), ValidationError);
}
