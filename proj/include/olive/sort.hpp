#pragma once

#include <bit>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "olive/primitives.hpp"
#include "olive/trace.hpp"

namespace olive {

// One compare-exchange: after it runs, cell_index(cells[lo]) <= cell_index(cells[hi]).
struct Comparator {
  uint64_t lo;
  uint64_t hi;

  friend bool operator==(const Comparator&, const Comparator&) = default;
};

namespace detail {

// Iterative Batcher bitonic network. The schedule depends only on `length`,
// which is the whole point: every input of a given size is driven through
// the identical comparator sequence. Both the materialized schedule and the
// in-place sort walk this one generator so they cannot drift apart.
template <class Visit>
void for_each_comparator(uint64_t length, Visit&& visit) {
  for (uint64_t k = 2; k <= length; k <<= 1) {
    for (uint64_t j = k >> 1; j > 0; j >>= 1) {
      for (uint64_t i = 0; i < length; ++i) {
        const uint64_t partner = i ^ j;
        if (partner > i) {
          if ((i & k) == 0) {
            visit(i, partner);
          } else {
            visit(partner, i);
          }
        }
      }
    }
  }
}

inline void require_power_of_two(uint64_t length) {
  if (length == 0 || !std::has_single_bit(length)) {
    throw std::invalid_argument("length must be padded to power of two");
  }
}

}  // namespace detail

// Closed form: (length / 2) * stages * (stages + 1) / 2 with stages = log2(length).
inline uint64_t comparator_count(uint64_t length) {
  detail::require_power_of_two(length);
  const uint64_t stages = uint64_t(std::countr_zero(length));
  return (length / 2) * stages * (stages + 1) / 2;
}

// Comparators in execution order for a power-of-two length. Length 1 is a
// trivially sorted network with no comparators.
inline std::vector<Comparator> comparator_schedule(uint64_t length) {
  detail::require_power_of_two(length);
  std::vector<Comparator> schedule;
  schedule.reserve(comparator_count(length));
  detail::for_each_comparator(length,
                              [&](uint64_t lo, uint64_t hi) { schedule.push_back({lo, hi}); });
  return schedule;
}

// In-place oblivious sort of packed cells by their index field. Every
// comparator is executed unconditionally and the exchange is a branchless
// o_swap, so the trace - read lo, read hi, write lo, write hi per comparator -
// is a pure function of the length.
inline void bitonic_sort(std::span<CtWord> cells, uint8_t region, Tracer& tracer) {
  detail::require_power_of_two(cells.size());
  CtWord* data = cells.data();
  detail::for_each_comparator(cells.size(), [&](uint64_t lo, uint64_t hi) {
    tracer.comparator(region, lo, hi);
    CtWord a = data[lo];
    CtWord b = data[hi];
    o_swap(cell_index(a) > cell_index(b), a, b);
    data[lo] = a;
    data[hi] = b;
  });
}

}  // namespace olive
