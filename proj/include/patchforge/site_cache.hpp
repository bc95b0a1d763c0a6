#pragma once

#include <map>
#include <span>
#include <vector>

#include "patchforge/model.hpp"

namespace patchforge {

/// Memoized edit sites for one model trunk. Editing only touches the last
/// FFN, the patch bank and nothing below them, so a site computed once stays
/// valid for every edited variant of the same base model.
class SiteCache {
 public:
  explicit SiteCache(const Model& model) : model_(&model) {}

  const EditSiteCache& get(const TokenSequence& x);
  /// Computes every missing site, spreading the work over `threads` workers
  /// (0 picks the hardware concurrency).
  void warm(std::span<const TokenSequence* const> inputs, unsigned threads = 0);
  std::size_t size() const { return sites_.size(); }

 private:
  const Model* model_;
  std::map<std::vector<int>, EditSiteCache> sites_;
};

}  // namespace patchforge
