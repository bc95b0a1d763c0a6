#include "patchforge/model.hpp"

#include <cmath>

#include "patchforge/errors.hpp"
#include "patchforge/patch_bank.hpp"
#include "patchforge/random.hpp"

namespace patchforge {

namespace {

constexpr double kLayerNormEps = 1e-5;

Matrix random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
  Matrix m(rows, cols);
  for (double& v : m.data()) v = rng.normal() * stddev;
  return m;
}

}  // namespace

std::vector<std::string> ModelConfig::violations() const {
  std::vector<std::string> out;
  if (d_model == 0) out.emplace_back("d_model must be positive");
  if (n_heads == 0) out.emplace_back("n_heads must be positive");
  if (n_heads != 0 && d_model % n_heads != 0) {
    out.emplace_back("d_model not divisible by n_heads (" + std::to_string(d_model) + " % " +
                     std::to_string(n_heads) + ")");
  }
  if (d_ff == 0) out.emplace_back("d_ff must be positive");
  if (n_layers == 0) out.emplace_back("n_layers must be at least 1");
  if (vocab_size == 0) out.emplace_back("vocab_size must be positive");
  if (n_classes < 2) out.emplace_back("n_classes must be at least 2");
  if (max_len < 4) out.emplace_back("max_len must be at least 4");
  if (!(embedding_std > 0.0) || !std::isfinite(embedding_std)) out.emplace_back("embedding_std must be positive and finite");
  if (activation != "gelu") out.emplace_back("unsupported activation '" + activation + "' (supported: gelu)");
  return out;
}

void ModelConfig::validate() const {
  const auto v = violations();
  if (v.empty()) return;
  std::string msg = "invalid model config:";
  for (const auto& s : v) msg += " " + s + ";";
  throw ValidationError(msg);
}

Model::Model(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  const std::size_t d = config_.d_model;
  token_embedding = Matrix(config_.vocab_size, d);
  position_embedding = Matrix(config_.max_len, d);
  layers.resize(config_.n_layers);
  for (EncoderLayer& layer : layers) {
    layer.ln1_gain = Matrix(1, d, 1.0);
    layer.ln1_bias = Matrix(1, d);
    layer.wq = Matrix(d, d);
    layer.bq = Matrix(1, d);
    layer.wk = Matrix(d, d);
    layer.bk = Matrix(1, d);
    layer.wv = Matrix(d, d);
    layer.bv = Matrix(1, d);
    layer.wo = Matrix(d, d);
    layer.bo = Matrix(1, d);
    layer.ln2_gain = Matrix(1, d, 1.0);
    layer.ln2_bias = Matrix(1, d);
    layer.ffn_keys = Matrix(d, config_.d_ff);
    layer.ffn_key_bias = Matrix(1, config_.d_ff);
    layer.ffn_values = Matrix(config_.d_ff, d);
    layer.ffn_value_bias = Matrix(1, d);
  }
  final_gain = Matrix(1, d, 1.0);
  final_bias = Matrix(1, d);
  head_weight = Matrix(d, config_.n_classes);
  head_bias = Matrix(1, config_.n_classes);
}

std::vector<ParamSlot> Model::parameters() {
  std::vector<ParamSlot> out;
  auto push = [&out](Matrix& m, std::string name) { out.push_back(ParamSlot{out.size(), &m, std::move(name)}); };
  push(token_embedding, "token_embedding");
  push(position_embedding, "position_embedding");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    EncoderLayer& l = layers[i];
    const std::string p = "layer" + std::to_string(i) + ".";
    push(l.ln1_gain, p + "ln1_gain");
    push(l.ln1_bias, p + "ln1_bias");
    push(l.wq, p + "wq");
    push(l.bq, p + "bq");
    push(l.wk, p + "wk");
    push(l.bk, p + "bk");
    push(l.wv, p + "wv");
    push(l.bv, p + "bv");
    push(l.wo, p + "wo");
    push(l.bo, p + "bo");
    push(l.ln2_gain, p + "ln2_gain");
    push(l.ln2_bias, p + "ln2_bias");
    push(l.ffn_keys, p + "ffn_keys");
    push(l.ffn_key_bias, p + "ffn_key_bias");
    push(l.ffn_values, p + "ffn_values");
    push(l.ffn_value_bias, p + "ffn_value_bias");
  }
  push(final_gain, "final_gain");
  push(final_bias, "final_bias");
  push(head_weight, "head_weight");
  push(head_bias, "head_bias");
  return out;
}

std::vector<const Matrix*> Model::parameters() const {
  std::vector<const Matrix*> out;
  for (const ParamSlot& s : const_cast<Model*>(this)->parameters()) out.push_back(s.value);
  return out;
}

std::vector<ParamId> Model::editable_ffn_ids() const {
  constexpr std::size_t kPerLayer = 16;
  const std::size_t base = 2 + (layers.size() - 1) * kPerLayer + 12;
  return {base, base + 1, base + 2, base + 3};
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const Matrix* m : parameters()) n += m->size();
  return n;
}

bool Model::operator==(const Model& other) const {
  if (!(config_ == other.config_)) return false;
  const auto a = parameters();
  const auto b = other.parameters();
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!(*a[i] == *b[i])) return false;
  }
  return true;
}

std::size_t expected_parameter_count(const ModelConfig& c) {
  const std::size_t d = c.d_model;
  const std::size_t attention = 4 * d * d + 4 * d;
  const std::size_t norms = 4 * d;
  const std::size_t ffn = d * c.d_ff + c.d_ff + c.d_ff * d + d;
  return c.vocab_size * d + c.max_len * d + c.n_layers * (attention + norms + ffn) + 2 * d + d * c.n_classes +
         c.n_classes;
}

Model init_model(const ModelConfig& config) {
  Model model(config);
  Rng rng(config.seed);
  const std::size_t d = config.d_model;
  const double wstd = 1.0 / std::sqrt(static_cast<double>(d));
  model.token_embedding = random_matrix(rng, config.vocab_size, d, config.embedding_std);
  model.position_embedding = random_matrix(rng, config.max_len, d, config.embedding_std);
  for (EncoderLayer& l : model.layers) {
    l.wq = random_matrix(rng, d, d, wstd);
    l.wk = random_matrix(rng, d, d, wstd);
    l.wv = random_matrix(rng, d, d, wstd);
    l.wo = random_matrix(rng, d, d, wstd);
    l.ffn_keys = random_matrix(rng, d, config.d_ff, wstd);
    l.ffn_values = random_matrix(rng, config.d_ff, d, 1.0 / std::sqrt(static_cast<double>(config.d_ff)));
  }
  model.head_weight = random_matrix(rng, d, config.n_classes, wstd);
  return model;
}

void check_sequence(const ModelConfig& config, const TokenSequence& x) {
  if (x.ids.empty()) throw ValidationError("empty token sequence");
  if (x.ids.size() > config.max_len) {
    throw ValidationError("sequence of length " + std::to_string(x.ids.size()) + " exceeds max_len " +
                          std::to_string(config.max_len) + "; refusing to truncate");
  }
  for (int id : x.ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= config.vocab_size) {
      throw ValidationError("token id " + std::to_string(id) + " outside vocabulary of " +
                            std::to_string(config.vocab_size));
    }
  }
}

TrunkVars build_trunk(const Model& model, Tape& tape, const TokenSequence& x) {
  const ModelConfig& cfg = model.config();
  check_sequence(cfg, x);
  const std::size_t len = x.ids.size();
  const std::size_t head_dim = cfg.d_model / cfg.n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));

  ParamId id = 0;
  auto param = [&](const Matrix& m) { return tape.parameter(id++, m); };

  Var tok = param(model.token_embedding);
  Var pos = param(model.position_embedding);
  Var h = tape.add(tape.take_rows(tok, x.ids), tape.slice_rows(pos, 0, len));

  for (std::size_t li = 0; li < model.layers.size(); ++li) {
    const EncoderLayer& l = model.layers[li];
    Var ln1g = param(l.ln1_gain), ln1b = param(l.ln1_bias);
    Var wq = param(l.wq), bq = param(l.bq), wk = param(l.wk), bk = param(l.bk);
    Var wv = param(l.wv), bv = param(l.bv), wo = param(l.wo), bo = param(l.bo);
    Var ln2g = param(l.ln2_gain), ln2b = param(l.ln2_bias);
    Var fk = param(l.ffn_keys), fkb = param(l.ffn_key_bias);
    Var fv = param(l.ffn_values), fvb = param(l.ffn_value_bias);

    Var normed = tape.layer_norm(h, ln1g, ln1b, kLayerNormEps);
    Var q = tape.add_row(tape.matmul(normed, wq), bq);
    Var k = tape.add_row(tape.matmul(normed, wk), bk);
    Var v = tape.add_row(tape.matmul(normed, wv), bv);
    std::vector<Var> heads;
    heads.reserve(cfg.n_heads);
    for (std::size_t hd = 0; hd < cfg.n_heads; ++hd) {
      Var qh = tape.slice_cols(q, hd * head_dim, head_dim);
      Var kh = tape.slice_cols(k, hd * head_dim, head_dim);
      Var vh = tape.slice_cols(v, hd * head_dim, head_dim);
      Var weights = tape.softmax_rows(tape.scale(tape.matmul_nt(qh, kh), scale));
      heads.push_back(tape.matmul(weights, vh));
    }
    Var attended = tape.add_row(tape.matmul(tape.concat_cols(heads), wo), bo);
    h = tape.add(h, attended);
    Var ffn_in = tape.layer_norm(h, ln2g, ln2b, kLayerNormEps);
    if (li + 1 == model.layers.size()) return TrunkVars{h, ffn_in};
    Var hidden = tape.gelu(tape.add_row(tape.matmul(ffn_in, fk), fkb));
    h = tape.add(h, tape.add_row(tape.matmul(hidden, fv), fvb));
  }
  throw ValidationError("model has no layers");
}

Var build_final_norm(const Model& model, Tape& tape, Var first_position) {
  const ParamId base = model.editable_ffn_ids().back() + 1;
  Var g = tape.parameter(base, model.final_gain);
  Var b = tape.parameter(base + 1, model.final_bias);
  return tape.layer_norm(first_position, g, b, kLayerNormEps);
}

Var build_head(const Model& model, Tape& tape, Var first_position) {
  const ParamId base = model.editable_ffn_ids().back() + 3;
  Var w = tape.parameter(base, model.head_weight);
  Var hb = tape.parameter(base + 1, model.head_bias);
  return tape.add_row(tape.matmul(build_final_norm(model, tape, first_position), w), hb);
}

Vector logits_from_site(const Model& model, const EditSiteCache& site, const PatchBank* patches) {
  const EncoderLayer& l = model.editable_layer();
  auto q = site.ffn_input.row(0);
  Vector out = ffn_forward(q, l.ffn_keys, l.ffn_key_bias.data(), l.ffn_values, l.ffn_value_bias.data());
  if (patches != nullptr) add_patch_contributions(q, *patches, out);
  axpy(1.0, site.residual.row(0), out);
  Matrix normed = layer_norm_rows(Matrix::row_vector(out), model.final_gain.data(), model.final_bias.data(),
                                  kLayerNormEps);
  return affine(normed.row(0), model.head_weight, model.head_bias.data());
}

ForwardResult forward(const Model& model, const TokenSequence& x, const PatchBank* patches) {
  Tape tape;
  TrunkVars trunk = build_trunk(model, tape, x);
  ForwardResult result;
  result.site.ffn_input = tape.value(trunk.ffn_input);
  result.site.residual = tape.value(trunk.residual);
  result.logits = logits_from_site(model, result.site, patches);
  return result;
}

std::size_t predict(const Model& model, const TokenSequence& x, const PatchBank* patches) {
  return argmax(forward(model, x, patches).logits);
}

}  // namespace patchforge
