#pragma once

// Binary checkpoint layout, all integers and floats little-endian:
//   "PFG1"
//   u64 header length, header bytes (UTF-8 JSON: {"model": ModelConfig, "meta": ...})
//   every model parameter as f64, in Model::parameters() order, row-major
//   u64 patch count, then per patch: u64 id, u64 origin_example_id, f64 b_p,
//   d_model f64 k_p, d_model f64 v_p

#include <filesystem>
#include <string>

#include "json.hpp"
#include "patchforge/model.hpp"
#include "patchforge/patch_bank.hpp"

namespace patchforge {

struct Checkpoint {
  Model model;
  PatchBank bank;
  nlohmann::json meta = nlohmann::json::object();
};

/// Throws SequencingError if the bank holds an unfrozen patch.
std::string encode_checkpoint(const Model& model, const PatchBank& bank, const nlohmann::json& meta);
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const Model& model, const PatchBank& bank,
                     const nlohmann::json& meta = nlohmann::json::object());
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace patchforge
