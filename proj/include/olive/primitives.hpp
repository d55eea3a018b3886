#pragma once

#include <bit>
#include <cstdint>

// Constant-time building blocks. Everything here must execute the same
// instruction sequence for both values of the condition: no conditional
// branches, no secret-dependent addresses. On x86-64 the selects are pinned
// to CMOV with inline asm (the compiler cannot legally re-introduce a branch
// across an asm boundary); elsewhere they fall back to the all-ones/all-zeros
// mask idiom. The test suite disassembles the compiled cores and rejects any
// conditional jump.

namespace olive {

// Packed aggregation cell: gradient coordinate in the high 32 bits, IEEE-754
// bit pattern of the value in the low 32. Comparing the index field alone
// orders cells by coordinate; the sentinel index sinks dummies past every
// real coordinate.
using CtWord = uint64_t;

inline constexpr uint32_t kSentinelIndex = 0xFFFFFFFFu;

constexpr CtWord pack_cell(uint32_t index, float value) {
  return (CtWord(index) << 32) | std::bit_cast<uint32_t>(value);
}

constexpr uint32_t cell_index(CtWord cell) { return uint32_t(cell >> 32); }

constexpr float cell_value(CtWord cell) {
  return std::bit_cast<float>(uint32_t(cell & 0xFFFFFFFFu));
}

constexpr bool is_sentinel(CtWord cell) { return cell_index(cell) == kSentinelIndex; }

// Returns on_true when cond is set, on_false otherwise, without branching.
inline uint64_t o_select_u64(bool cond, uint64_t on_true, uint64_t on_false) {
#if defined(__x86_64__)
  uint64_t out = on_true;
  asm("testb %b1, %b1\n\t"
      "cmoveq %2, %0"
      : "+r"(out)
      : "r"(cond), "r"(on_false)
      : "cc");
  return out;
#else
  const uint64_t mask = 0 - uint64_t(cond);
  return (on_true & mask) | (on_false & ~mask);
#endif
}

inline uint32_t o_select_u32(bool cond, uint32_t on_true, uint32_t on_false) {
#if defined(__x86_64__)
  uint32_t out = on_true;
  asm("testb %b1, %b1\n\t"
      "cmovel %2, %0"
      : "+r"(out)
      : "r"(cond), "r"(on_false)
      : "cc");
  return out;
#else
  const uint32_t mask = 0 - uint32_t(cond);
  return (on_true & mask) | (on_false & ~mask);
#endif
}

// Mask-arithmetic select. Same contract as o_select_u32 but expressed as
// plain integer ops so the compiler may vectorize sweeps that apply it to
// every element (position-map scans); the scalar forms above pin a CMOV,
// which blocks vectorization.
inline uint32_t o_select_u32_mask(bool cond, uint32_t on_true, uint32_t on_false) {
  const uint32_t mask = 0 - uint32_t(cond);
  return (on_true & mask) | (on_false & ~mask);
}

inline uint64_t o_select(bool cond, uint64_t on_true, uint64_t on_false) {
  return o_select_u64(cond, on_true, on_false);
}

inline uint32_t o_select(bool cond, uint32_t on_true, uint32_t on_false) {
  return o_select_u32(cond, on_true, on_false);
}

inline float o_select(bool cond, float on_true, float on_false) {
  return std::bit_cast<float>(o_select_u32(cond, std::bit_cast<uint32_t>(on_true),
                                           std::bit_cast<uint32_t>(on_false)));
}

inline double o_select(bool cond, double on_true, double on_false) {
  return std::bit_cast<double>(o_select_u64(cond, std::bit_cast<uint64_t>(on_true),
                                            std::bit_cast<uint64_t>(on_false)));
}

// Exchanges a and b when cond is set. The XOR-difference is gated by a mask
// produced through the CMOV core, so the data flow never branches on cond.
inline void o_swap_u64(bool cond, uint64_t& a, uint64_t& b) {
  const uint64_t mask = o_select_u64(cond, ~0ULL, 0ULL);
  const uint64_t diff = (a ^ b) & mask;
  a ^= diff;
  b ^= diff;
}

inline void o_swap(bool cond, CtWord& a, CtWord& b) { o_swap_u64(cond, a, b); }

inline void o_swap(bool cond, float& a, float& b) {
  uint32_t ua = std::bit_cast<uint32_t>(a);
  uint32_t ub = std::bit_cast<uint32_t>(b);
  const uint32_t mask = o_select_u32(cond, ~0u, 0u);
  const uint32_t diff = (ua ^ ub) & mask;
  a = std::bit_cast<float>(ua ^ diff);
  b = std::bit_cast<float>(ub ^ diff);
}

}  // namespace olive
