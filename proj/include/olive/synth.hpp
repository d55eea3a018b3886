#pragma once

#include <cstdint>
#include <numeric>
#include <vector>

#include "olive/aggregate.hpp"
#include "olive/rng.hpp"

namespace olive {

// Draws `count` distinct indices from [0, space) by partially shuffling a
// caller-owned identity pool, then undoing the swaps. Keeps instance
// generation O(k) per client instead of O(d).
class IndexSampler {
 public:
  explicit IndexSampler(uint32_t space) : pool_(space) {
    std::iota(pool_.begin(), pool_.end(), 0u);
  }

  std::vector<uint32_t> draw(uint32_t count, Rng& rng) {
    std::vector<uint32_t> picked(count);
    swaps_.clear();
    for (uint32_t j = 0; j < count; ++j) {
      const uint32_t r = j + rng.bounded_u32(uint32_t(pool_.size()) - j);
      swaps_.push_back({j, r});
      std::swap(pool_[j], pool_[r]);
      picked[j] = pool_[j];
    }
    for (auto it = swaps_.rbegin(); it != swaps_.rend(); ++it) {
      std::swap(pool_[it->first], pool_[it->second]);
    }
    return picked;
  }

 private:
  std::vector<uint32_t> pool_;
  std::vector<std::pair<uint32_t, uint32_t>> swaps_;
};

// Random aggregation instance: per client, k distinct indices uniform over
// [0, d) with values uniform in [-1, 1].
inline AggregateInstance random_instance(uint64_t n, uint64_t k, uint64_t d, Rng& rng) {
  AggregateInstance inst;
  inst.n = n;
  inst.k = k;
  inst.d = d;
  inst.cells.reserve(n * k);
  IndexSampler sampler{uint32_t(d)};
  for (uint64_t i = 0; i < n; ++i) {
    const auto indices = sampler.draw(uint32_t(k), rng);
    for (const uint32_t idx : indices) {
      inst.cells.push_back(pack_cell(idx, rng.next_float() * 2.0f - 1.0f));
    }
  }
  return inst;
}

// Sorted per-client index sets of an instance (sentinels dropped); this is
// the ground truth the leak-recovery checks compare against.
inline std::vector<std::vector<uint64_t>> instance_supports(const AggregateInstance& inst) {
  std::vector<std::vector<uint64_t>> supports(inst.n);
  for (uint64_t i = 0; i < inst.n; ++i) {
    auto& s = supports[i];
    for (uint64_t j = 0; j < inst.k; ++j) {
      const CtWord cell = inst.cells[i * inst.k + j];
      if (!is_sentinel(cell)) s.push_back(cell_index(cell));
    }
    std::sort(s.begin(), s.end());
  }
  return supports;
}

// True when two instances have identical index multisets (values ignored),
// i.e. the pair is useless for a distinguishability check of the leaky
// aggregator, whose trace depends on addresses alone.
inline bool same_index_multiset(const AggregateInstance& a, const AggregateInstance& b) {
  if (a.cells.size() != b.cells.size()) return false;
  std::vector<uint32_t> ia, ib;
  ia.reserve(a.cells.size());
  ib.reserve(b.cells.size());
  for (const CtWord cell : a.cells) ia.push_back(cell_index(cell));
  for (const CtWord cell : b.cells) ib.push_back(cell_index(cell));
  std::sort(ia.begin(), ia.end());
  std::sort(ib.begin(), ib.end());
  return ia == ib;
}

}  // namespace olive
