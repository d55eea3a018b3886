#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "olive/rng.hpp"

namespace olive {

// Simulation-grade sealing for client updates. A keyed splitmix keystream
// encrypts the payload and a keyed absorb over the header and ciphertext
// authenticates it, so tampering, key mismatch, and replay under a different
// (user, round) binding are all caught. It models the seal/verify round-trip
// of a submission pipeline; it is not a vetted cipher and must not guard
// real secrets.

struct AeadKey {
  uint64_t hi = 0;
  uint64_t lo = 0;

  bool operator==(const AeadKey&) const = default;
};

struct Sealed {
  std::vector<uint8_t> ciphertext;
  uint64_t tag = 0;
  uint32_t user = 0;
  uint32_t round = 0;
};

namespace detail {

inline uint64_t keystream_seed(const AeadKey& key, uint32_t user, uint32_t round) {
  return derive_seed(key.hi, key.lo, 0x6b73u, user, round);
}

inline uint64_t seal_tag(const AeadKey& key, uint32_t user, uint32_t round,
                         const std::vector<uint8_t>& ciphertext) {
  uint64_t acc = derive_seed(key.hi, key.lo, 0x7467u, user, round, ciphertext.size());
  uint64_t word = 0;
  uint32_t filled = 0;
  for (const uint8_t b : ciphertext) {
    word = (word << 8) | b;
    if (++filled == 8) {
      acc = mix64(acc ^ word);
      word = 0;
      filled = 0;
    }
  }
  if (filled != 0) acc = mix64(acc ^ word ^ (uint64_t(filled) << 56));
  return mix64(acc);
}

inline void apply_keystream(const AeadKey& key, uint32_t user, uint32_t round,
                            std::vector<uint8_t>& data) {
  uint64_t state = keystream_seed(key, user, round);
  uint64_t block = 0;
  for (size_t i = 0; i < data.size(); ++i) {
    if (i % 8 == 0) block = mix64(state + i / 8);
    data[i] ^= uint8_t(block >> ((i % 8) * 8));
  }
}

}  // namespace detail

inline Sealed seal(std::vector<uint8_t> plaintext, const AeadKey& key, uint32_t user,
                   uint32_t round) {
  Sealed out;
  out.user = user;
  out.round = round;
  out.ciphertext = std::move(plaintext);
  detail::apply_keystream(key, user, round, out.ciphertext);
  out.tag = detail::seal_tag(key, user, round, out.ciphertext);
  return out;
}

// Verifies the tag under (key, user, round) before decrypting; any mismatch
// in payload, key, or binding throws.
inline std::vector<uint8_t> open_sealed(const Sealed& sealed, const AeadKey& key) {
  if (detail::seal_tag(key, sealed.user, sealed.round, sealed.ciphertext) != sealed.tag) {
    throw std::runtime_error("authentication failure");
  }
  std::vector<uint8_t> plaintext = sealed.ciphertext;
  detail::apply_keystream(key, sealed.user, sealed.round, plaintext);
  return plaintext;
}

}  // namespace olive
