#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "patchforge/matrix.hpp"
#include "patchforge/optimizer.hpp"
#include "patchforge/tape.hpp"

namespace patchforge {

class PatchBank;

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t d_ff = 128;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t vocab_size = 0;
  std::size_t n_classes = 2;
  std::size_t max_len = 32;
  std::string activation = "gelu";
  /// Std of the token and position embedding init. Small values keep the
  /// random part of rarely seen tokens from swamping what they learn.
  double embedding_std = 0.2;
  std::uint64_t seed = 0;

  /// Empty when valid, otherwise one message per violated constraint.
  std::vector<std::string> violations() const;
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// Token ids; position 0 holds the classification sentinel.
struct TokenSequence {
  std::vector<int> ids;
  bool operator==(const TokenSequence&) const = default;
};

struct EncoderLayer {
  Matrix ln1_gain, ln1_bias;
  Matrix wq, bq, wk, bk, wv, bv, wo, bo;
  Matrix ln2_gain, ln2_bias;
  // Feed-forward key/value memory: ffn_keys is d_model x d_ff, ffn_values is d_ff x d_model.
  Matrix ffn_keys, ffn_key_bias, ffn_values, ffn_value_bias;
};

/// Pre-norm transformer encoder classifier reading the first position.
class Model {
 public:
  Model() = default;
  explicit Model(ModelConfig config);

  const ModelConfig& config() const { return config_; }

  Matrix token_embedding;
  Matrix position_embedding;
  std::vector<EncoderLayer> layers;
  Matrix final_gain, final_bias;
  Matrix head_weight, head_bias;

  EncoderLayer& editable_layer() { return layers.back(); }
  const EncoderLayer& editable_layer() const { return layers.back(); }

  /// Every parameter in serialization order; ParamId equals the slot index.
  std::vector<ParamSlot> parameters();
  std::vector<const Matrix*> parameters() const;
  /// Ids of the editable layer's K, b_k, V, b_v.
  std::vector<ParamId> editable_ffn_ids() const;
  std::size_t parameter_count() const;

  bool operator==(const Model& other) const;

 private:
  ModelConfig config_;
};

/// Closed-form parameter count for a config.
std::size_t expected_parameter_count(const ModelConfig& config);

Model init_model(const ModelConfig& config);

/// What the editable layer saw for one input: the per-position FFN inputs q
/// and the residual stream entering the FFN.
struct EditSiteCache {
  Matrix ffn_input;
  Matrix residual;
};

struct ForwardResult {
  Vector logits;
  EditSiteCache site;
};

/// Runs the encoder up to the editable FFN, recording onto `tape`.
struct TrunkVars {
  Var residual;
  Var ffn_input;
};
TrunkVars build_trunk(const Model& model, Tape& tape, const TokenSequence& x);

/// Final layer norm of the first-position output of the editable layer.
Var build_final_norm(const Model& model, Tape& tape, Var first_position);
/// Classifier head on top of build_final_norm.
Var build_head(const Model& model, Tape& tape, Var first_position);

/// Logits for `x`; the editable layer uses the patched FFN when a bank is given.
/// Only the first position of the final layer is materialized: it is the only
/// one the classifier reads.
ForwardResult forward(const Model& model, const TokenSequence& x, const PatchBank* patches = nullptr);

/// Logits from a cached edit site, skipping the frozen trunk.
Vector logits_from_site(const Model& model, const EditSiteCache& site, const PatchBank* patches = nullptr);

std::size_t predict(const Model& model, const TokenSequence& x, const PatchBank* patches = nullptr);

void check_sequence(const ModelConfig& config, const TokenSequence& x);

}  // namespace patchforge
