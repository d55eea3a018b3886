#pragma once

#include <bit>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "olive/aggregate.hpp"
#include "olive/primitives.hpp"
#include "olive/rng.hpp"
#include "olive/trace.hpp"

namespace olive {

enum class OramOp : uint8_t { kRead, kWriteAdd };

// Non-recursive PathORAM over float payloads with a linear-scan position map.
//
// Observable behavior per access is one fixed pattern: a full read sweep and
// a full write sweep over the position map (lookup + remap), a read of every
// bucket on the target's path, a stash sweep, a write of every path bucket,
// and a final stash sweep. The only data-dependent part is WHICH path, and
// the path is the block's previously assigned leaf - a uniform value that is
// remapped on every touch, independent of addresses and payloads. Tree cells
// are traced at bucket granularity, stash cells at slot granularity.
//
// The stash array has stash_slots persistent slots plus room for one path's
// worth of blocks in flight; if more than stash_slots blocks remain after
// eviction the access throws. Intra-stash bookkeeping (finding a free slot,
// choosing eviction victims) runs below trace granularity - the model treats
// each stash pass as an atomic full sweep, the same way tree buckets hide
// their internal slot order.
class PathOram {
 public:
  struct Params {
    uint64_t capacity = 0;
    uint32_t bucket_slots = 4;  // blocks per tree bucket (Z)
    uint32_t stash_slots = 20;  // persistent stash bound (S)
    bool log_leaves = false;    // record the accessed leaf per access
  };

  PathOram(const Params& params, uint64_t seed, Tracer& tracer)
      : params_(params), rng_(seed), tracer_(&tracer) {
    if (params.capacity == 0) throw std::invalid_argument("capacity must be positive");
    if (params.bucket_slots == 0) throw std::invalid_argument("bucket must hold a block");
    levels_ = uint32_t(std::bit_width(params.capacity - 1)) + 1;  // root plus L tree levels
    leaves_ = uint64_t(1) << (levels_ - 1);
    tree_.assign((uint64_t(2) << (levels_ - 1)) - 1,
                 std::vector<Block>(params.bucket_slots));
    stash_.assign(params.stash_slots + uint64_t(params.bucket_slots) * levels_, Block{});
    position_map_.resize(params.capacity);
    for (auto& leaf : position_map_) leaf = uint32_t(rng_.bounded(leaves_));
  }

  uint64_t capacity() const { return params_.capacity; }
  uint64_t leaf_count() const { return leaves_; }
  uint32_t level_count() const { return levels_; }
  uint64_t bucket_count() const { return tree_.size(); }
  uint64_t overflow_count() const { return overflows_; }
  const std::vector<uint32_t>& leaf_log() const { return leaf_log_; }

  // Events emitted per access, a constant of the geometry.
  uint64_t events_per_access() const {
    return 2 * params_.capacity + 2 * levels_ + 4 * stash_.size();
  }

  // Performs one oblivious access: read returns the stored value, write_add
  // adds `delta` and returns the updated value. Blocks start at zero; a
  // block's first touch materializes it.
  float access(OramOp op, uint64_t addr, float delta = 0.0f) {
    if (addr >= params_.capacity) throw std::out_of_range("index out of range");

    // Position map lookup as a one-hot gather, then remap under a fresh
    // uniform leaf. Both sweeps touch every entry.
    const uint32_t target = uint32_t(addr);
    const uint32_t* map = position_map_.data();
    uint32_t leaf = 0;
    for (uint64_t a = 0; a < position_map_.size(); ++a) {
      leaf |= map[a] & (0u - uint32_t(uint32_t(a) == target));
    }
    tracer_->scan(kRegionOramMap, MemOp::kRead, 0, 1, position_map_.size());
    const uint32_t new_leaf = uint32_t(rng_.bounded(leaves_));
    uint32_t* wmap = position_map_.data();
    for (uint64_t a = 0; a < position_map_.size(); ++a) {
      wmap[a] = o_select_u32_mask(uint32_t(a) == target, new_leaf, wmap[a]);
    }
    tracer_->scan(kRegionOramMap, MemOp::kWrite, 0, 1, position_map_.size());
    if (params_.log_leaves) leaf_log_.push_back(leaf);

    // Pull the path into the stash.
    for (uint32_t level = 0; level < levels_; ++level) {
      const uint64_t b = bucket_at(leaf, level);
      tracer_->on_read(kRegionOramTree, b);
      for (auto& block : tree_[b]) {
        if (block.addr != kEmptyAddr) {
          stash_place(block);
          block = Block{};
        }
      }
    }

    // Find or materialize the target, apply the op, pin its new leaf.
    float previous = 0.0f;
    bool found = false;
    for (auto& block : stash_) {
      const bool match = block.addr == target;
      previous = o_select(match, block.payload, previous);
      block.payload = o_select(match && op == OramOp::kWriteAdd,
                               block.payload + delta, block.payload);
      block.leaf = o_select_u32(match, new_leaf, block.leaf);
      found |= match;
    }
    if (!found) {
      const float initial = op == OramOp::kWriteAdd ? delta : 0.0f;
      stash_place(Block{target, new_leaf, initial});
    }
    tracer_->scan_rw(kRegionOramStash, 0, 1, stash_.size());

    // Greedy write-back along the accessed path: each block sinks to the
    // deepest non-full bucket its leaf still shares with this path.
    fill_.assign(levels_, 0);
    auto& fill = fill_;
    for (auto& block : stash_) {
      if (block.addr == kEmptyAddr) continue;
      const uint32_t depth = shared_depth(block.leaf, leaf);
      for (int level = int(depth); level >= 0; --level) {
        if (fill[level] < params_.bucket_slots) {
          tree_[bucket_at(leaf, uint32_t(level))][fill[level]++] = block;
          block = Block{};
          break;
        }
      }
    }
    for (uint32_t level = 0; level < levels_; ++level) {
      tracer_->on_write(kRegionOramTree, bucket_at(leaf, level));
    }
    tracer_->scan_rw(kRegionOramStash, 0, 1, stash_.size());

    uint64_t occupied = 0;
    for (const auto& block : stash_) occupied += block.addr != kEmptyAddr;
    if (occupied > params_.stash_slots) {
      ++overflows_;
      throw std::runtime_error("stash overflow");
    }
    return op == OramOp::kWriteAdd ? previous + delta : previous;
  }

 private:
  static constexpr uint32_t kEmptyAddr = 0xFFFFFFFFu;

  struct Block {
    uint32_t addr = kEmptyAddr;
    uint32_t leaf = 0;
    float payload = 0.0f;
  };

  uint64_t bucket_at(uint32_t leaf, uint32_t level) const {
    return (uint64_t(1) << level) - 1 + (uint64_t(leaf) >> (levels_ - 1 - level));
  }

  // Deepest level (0 = root) whose bucket on the `path_leaf` path may hold a
  // block mapped to `block_leaf`.
  uint32_t shared_depth(uint32_t block_leaf, uint32_t path_leaf) const {
    const uint32_t diff = block_leaf ^ path_leaf;
    return levels_ - 1 - uint32_t(std::bit_width(diff));
  }

  void stash_place(const Block& block) {
    for (auto& slot : stash_) {
      if (slot.addr == kEmptyAddr) {
        slot = block;
        return;
      }
    }
    ++overflows_;
    throw std::runtime_error("stash overflow");
  }

  Params params_;
  Rng rng_;
  Tracer* tracer_;
  uint32_t levels_ = 0;
  uint64_t leaves_ = 0;
  std::vector<std::vector<Block>> tree_;
  std::vector<Block> stash_;
  std::vector<uint32_t> position_map_;
  std::vector<uint32_t> leaf_log_;
  std::vector<uint32_t> fill_;
  uint64_t overflows_ = 0;
};

// ORAM-backed aggregation: stream every input cell into an accumulator ORAM
// of capacity d via write_add, then read the d coordinates back out. Every
// cell costs one access whether or not it is a sentinel (dummies degrade to
// a zero-delta touch of coordinate 0), so the access count and trace shape
// depend only on (n, k, d).
inline DenseVector oram_aggregate(const AggregateInstance& inst, const PathOram::Params& params,
                                  uint64_t seed, Tracer& tracer) {
  detail::validate_instance(inst);
  PathOram::Params p = params;
  p.capacity = inst.d;
  PathOram oram(p, seed, tracer);
  for (uint64_t q = 0; q < inst.cells.size(); ++q) {
    tracer.on_read(kRegionInput, q);
    const CtWord cell = inst.cells[q];
    const bool dummy = is_sentinel(cell);
    const uint64_t addr = o_select_u64(dummy, 0, cell_index(cell));
    const float delta = o_select(dummy, 0.0f, cell_value(cell));
    oram.access(OramOp::kWriteAdd, addr, delta);
  }
  DenseVector target(inst.d);
  for (uint64_t j = 0; j < inst.d; ++j) target[j] = oram.access(OramOp::kRead, j);
  return target;
}

}  // namespace olive
