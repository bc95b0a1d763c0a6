#include "patchforge/site_cache.hpp"

#include <algorithm>
#include <thread>

namespace patchforge {

const EditSiteCache& SiteCache::get(const TokenSequence& x) {
  auto it = sites_.find(x.ids);
  if (it != sites_.end()) return it->second;
  return sites_.emplace(x.ids, forward(*model_, x).site).first->second;
}

void SiteCache::warm(std::span<const TokenSequence* const> inputs, unsigned threads) {
  std::vector<const TokenSequence*> missing;
  for (const TokenSequence* x : inputs) {
    if (sites_.count(x->ids) == 0) missing.push_back(x);
  }
  std::sort(missing.begin(), missing.end(), [](auto* a, auto* b) { return a->ids < b->ids; });
  missing.erase(std::unique(missing.begin(), missing.end(), [](auto* a, auto* b) { return a->ids == b->ids; }),
                missing.end());
  if (missing.empty()) return;

  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min<unsigned>(threads, static_cast<unsigned>(missing.size()));
  std::vector<EditSiteCache> out(missing.size());
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      for (std::size_t i = t; i < missing.size(); i += threads) out[i] = forward(*model_, *missing[i]).site;
    });
  }
  for (auto& th : pool) th.join();
  for (std::size_t i = 0; i < missing.size(); ++i) sites_.emplace(missing[i]->ids, std::move(out[i]));
}

}  // namespace patchforge
