#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "olive/primitives.hpp"
#include "olive/rng.hpp"
#include "olive/sort.hpp"
#include "olive/trace.hpp"

namespace olive {

// One client's sparsified model delta: index/value pairs, indices distinct.
struct SparseEntry {
  uint32_t index;
  float value;

  friend bool operator==(const SparseEntry&, const SparseEntry&) = default;
};

struct SparseGradient {
  std::vector<SparseEntry> entries;
};

// A batch ready for aggregation: n clients with exactly k packed cells each,
// client-major, over a dense space of d coordinates. Cells may carry the
// sentinel index (dummy padding); every real index must be < d.
struct AggregateInstance {
  uint64_t n = 0;
  uint64_t k = 0;
  uint64_t d = 0;
  std::vector<CtWord> cells;
};

using DenseVector = std::vector<float>;

inline AggregateInstance pack_instance(std::span<const SparseGradient> clients, uint64_t d) {
  AggregateInstance inst;
  inst.n = clients.size();
  inst.k = clients.empty() ? 0 : clients.front().entries.size();
  inst.d = d;
  inst.cells.reserve(inst.n * inst.k);
  for (const auto& client : clients) {
    if (client.entries.size() != inst.k) {
      throw std::invalid_argument("clients must have equal entry counts");
    }
    for (const auto& e : client.entries) inst.cells.push_back(pack_cell(e.index, e.value));
  }
  return inst;
}

namespace detail {

inline void validate_instance(const AggregateInstance& inst) {
  if (inst.n == 0 || inst.k == 0 || inst.d == 0) {
    throw std::invalid_argument("instance dimensions must be positive");
  }
  if (inst.cells.size() != inst.n * inst.k) {
    throw std::invalid_argument("cell count does not match n * k");
  }
  for (const CtWord cell : inst.cells) {
    const uint32_t idx = cell_index(cell);
    if (idx >= inst.d && idx != kSentinelIndex) {
      throw std::out_of_range("index out of range");
    }
  }
}

}  // namespace detail

// Data-dependent scatter-add. Every entry costs three events - read the
// input cell, then read and write the dense target at the entry's own
// coordinate - so the write addresses spell out each client's support set.
// This is the leaky reference point the oblivious algorithms are measured
// against. Sentinel cells name no real coordinate and skip the dense update
// (one read event only), which shortens that client's trace segment.
inline DenseVector linear_aggregate(const AggregateInstance& inst, Tracer& tracer) {
  detail::validate_instance(inst);
  DenseVector target(inst.d, 0.0f);
  for (uint64_t q = 0; q < inst.cells.size(); ++q) {
    tracer.on_read(kRegionInput, q);
    const CtWord cell = inst.cells[q];
    if (is_sentinel(cell)) continue;
    const uint32_t idx = cell_index(cell);
    tracer.on_read(kRegionAggregate, idx);
    target[idx] += cell_value(cell);
    tracer.on_write(kRegionAggregate, idx);
  }
  return target;
}

// Congruence-sweep aggregation. For each input entry the algorithm sweeps
// every dense cell whose address is congruent to the entry's coordinate
// modulo the cacheline width c, updating each swept cell through a
// branchless select. An adversary who resolves addresses only to cacheline
// granularity sees, per entry, one fixed-length sweep whose bucket sequence
// depends on nothing but c and d, because the dense backing is padded to a
// multiple of c: without the padding, sweeps for offsets below d mod c would
// be one cell longer than the rest and leak the coordinate's residue class.
// Cost is O(n * k * d / c).
inline DenseVector baseline_aggregate(const AggregateInstance& inst, uint64_t cacheline_c,
                                      Tracer& tracer) {
  detail::validate_instance(inst);
  if (cacheline_c == 0) throw std::invalid_argument("cacheline width must be positive");
  const uint64_t c = cacheline_c;
  const uint64_t padded = (inst.d + c - 1) / c * c;
  const uint64_t sweep_cells = padded / c;
  DenseVector target(padded, 0.0f);
  float* data = target.data();
  for (uint64_t q = 0; q < inst.cells.size(); ++q) {
    tracer.on_read(kRegionInput, q);
    const CtWord cell = inst.cells[q];
    const uint64_t idx = cell_index(cell);
    const float val = cell_value(cell);
    const uint64_t offset = idx % c;
    tracer.scan_rw(kRegionAggregate, offset, c, sweep_cells);
    for (uint64_t s = 0; s < sweep_cells; ++s) {
      const uint64_t x = offset + s * c;
      const float updated = data[x] + val;
      data[x] = o_select(x == idx, updated, data[x]);
    }
  }
  target.resize(inst.d);
  return target;
}

namespace detail {

// Linear oblivious fold over index-sorted cells: every run of equal indices
// collapses into its last cell, and the earlier run members turn into
// sentinels. Writing the running cell one slot behind the cursor keeps the
// pass shape fixed: read p, write p-1, regardless of where runs start or end.
inline void fold_duplicates(std::span<CtWord> cells, uint8_t region, Tracer& tracer) {
  if (cells.empty()) return;
  tracer.on_read(region, 0);
  CtWord running = cells[0];
  for (uint64_t p = 1; p < cells.size(); ++p) {
    tracer.on_read(region, p);
    const CtWord cur = cells[p];
    const bool same = cell_index(cur) == cell_index(running);
    const CtWord merged =
        pack_cell(cell_index(cur), cell_value(running) + cell_value(cur));
    cells[p - 1] = o_select(same, pack_cell(kSentinelIndex, 0.0f), running);
    tracer.on_write(region, p - 1);
    running = o_select(same, merged, cur);
  }
  cells[cells.size() - 1] = running;
  tracer.on_write(region, cells.size() - 1);
}

// Shared core of the sort-based aggregators: aggregate `cells` (whose input
// trace region cells start at `input_base`) into a dense working array of
// length next_pow2(cells + d) and leave indices 0..d-1 in the first d slots.
inline std::vector<CtWord> sorted_fold(std::span<const CtWord> cells, uint64_t input_base,
                                       uint64_t d, Tracer& tracer) {
  const uint64_t m = std::bit_ceil(cells.size() + d);
  std::vector<CtWord> work(m);
  // Move the inputs in, then seed one explicit zero cell per dense
  // coordinate. The seeds guarantee every coordinate survives the fold with
  // at least one cell, so the final sort puts exactly indices 0..d-1 first.
  for (uint64_t q = 0; q < cells.size(); ++q) work[q] = cells[q];
  tracer.scan_copy(kRegionInput, input_base, kRegionWork, 0, cells.size());
  for (uint64_t j = 0; j < d; ++j) work[cells.size() + j] = pack_cell(uint32_t(j), 0.0f);
  tracer.scan(kRegionWork, MemOp::kWrite, cells.size(), 1, d);
  for (uint64_t x = cells.size() + d; x < m; ++x) work[x] = pack_cell(kSentinelIndex, 0.0f);
  tracer.scan(kRegionWork, MemOp::kWrite, cells.size() + d, 1, m - cells.size() - d);
  bitonic_sort(work, kRegionWork, tracer);
  fold_duplicates(work, kRegionWork, tracer);
  bitonic_sort(work, kRegionWork, tracer);
  return work;
}

}  // namespace detail

// Sort-based oblivious aggregation: pad inputs and per-coordinate zero seeds
// to a power of two, bitonic-sort by coordinate, fold equal-coordinate runs,
// sort the sentinels out, read off the first d cells. Every phase is a fixed
// network or a fixed sweep, so the whole trace is a function of (n, k, d)
// alone. Cost is O(m log^2 m) with m = next_pow2(n * k + d).
inline DenseVector advanced_aggregate(const AggregateInstance& inst, Tracer& tracer) {
  detail::validate_instance(inst);
  const std::vector<CtWord> work = detail::sorted_fold(inst.cells, 0, inst.d, tracer);
  DenseVector target(inst.d);
  for (uint64_t j = 0; j < inst.d; ++j) target[j] = cell_value(work[j]);
  tracer.scan_copy(kRegionWork, 0, kRegionAggregate, 0, inst.d);
  return target;
}

// Grouped variant: clients are cut into ceil(n / group_h) groups, each group
// runs the sort-based aggregation on its own (much smaller) working array,
// and the dense group results are accumulated coordinate-by-coordinate.
// Groups are data-independent slices, so the trace is still a function of
// (n, k, d, h); the win is that each group's working set is m_g =
// next_pow2(h * k + d) cells, which drops both the comparator count and,
// at the scales where it matters, the cache footprint. With h = n the
// algorithm degenerates to exactly one group and the trace and output match
// the ungrouped aggregation bit for bit.
inline DenseVector grouped_advanced_aggregate(const AggregateInstance& inst, uint64_t group_h,
                                              Tracer& tracer) {
  detail::validate_instance(inst);
  if (group_h == 0) throw std::invalid_argument("group size must be positive");
  const uint64_t groups = (inst.n + group_h - 1) / group_h;
  DenseVector target(inst.d, 0.0f);
  for (uint64_t g = 0; g < groups; ++g) {
    const uint64_t first_client = g * group_h;
    const uint64_t client_count = std::min(group_h, inst.n - first_client);
    const uint64_t cell_base = first_client * inst.k;
    const std::span<const CtWord> slice(inst.cells.data() + cell_base,
                                        client_count * inst.k);
    const std::vector<CtWord> work = detail::sorted_fold(slice, cell_base, inst.d, tracer);
    if (g == 0) {
      for (uint64_t j = 0; j < inst.d; ++j) target[j] = cell_value(work[j]);
      tracer.scan_copy(kRegionWork, 0, kRegionAggregate, 0, inst.d);
    } else {
      for (uint64_t j = 0; j < inst.d; ++j) target[j] += cell_value(work[j]);
      tracer.scan_merge(kRegionWork, 0, kRegionAggregate, 0, inst.d);
    }
  }
  return target;
}

// Server-side averaging with Gaussian perturbation: out = (sum + noise) / divisor,
// noise drawn per coordinate with standard deviation noise_std (zero draws
// are still taken when noise_std is 0, so the noise stream position never
// depends on the scale). Traced as two full write sweeps over the dense
// target: one for the noise add, one for the divide.
inline void average_and_perturb(DenseVector& aggregate, double divisor, double noise_std,
                                Rng& rng, Tracer& tracer) {
  if (divisor <= 0.0) throw std::invalid_argument("divisor must be positive");
  if (noise_std < 0.0) throw std::invalid_argument("noise scale must be nonnegative");
  for (auto& v : aggregate) v = float(double(v) + noise_std * rng.normal());
  tracer.scan(kRegionAggregate, MemOp::kWrite, 0, 1, aggregate.size());
  for (auto& v : aggregate) v = float(double(v) / divisor);
  tracer.scan(kRegionAggregate, MemOp::kWrite, 0, 1, aggregate.size());
}

// Gradient batch file: magic "OLV1", u32 version, u32 n, u32 k, u32 d, then
// n * k records of (u32 index, f32 value), little endian, client-major.
inline constexpr char kBatchMagic[4] = {'O', 'L', 'V', '1'};
inline constexpr uint32_t kBatchVersion = 1;

inline void write_gradient_batch(const std::string& path, const AggregateInstance& inst) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path);
  out.write(kBatchMagic, 4);
  detail::put_u32(out, kBatchVersion);
  detail::put_u32(out, uint32_t(inst.n));
  detail::put_u32(out, uint32_t(inst.k));
  detail::put_u32(out, uint32_t(inst.d));
  for (const CtWord cell : inst.cells) {
    detail::put_u32(out, cell_index(cell));
    detail::put_u32(out, uint32_t(cell & 0xFFFFFFFFu));
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

inline AggregateInstance read_gradient_batch(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kBatchMagic, 4) != 0) throw std::runtime_error("bad magic");
  if (detail::get_u32(in) != kBatchVersion) throw std::runtime_error("unsupported version");
  AggregateInstance inst;
  inst.n = detail::get_u32(in);
  inst.k = detail::get_u32(in);
  inst.d = detail::get_u32(in);
  inst.cells.reserve(inst.n * inst.k);
  for (uint64_t q = 0; q < inst.n * inst.k; ++q) {
    const uint32_t idx = detail::get_u32(in);
    const uint32_t bits = detail::get_u32(in);
    inst.cells.push_back((CtWord(idx) << 32) | bits);
  }
  detail::validate_instance(inst);
  return inst;
}

}  // namespace olive
