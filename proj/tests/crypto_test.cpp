#include "olive/crypto.hpp"

#include <cstdint>
#include <vector>

#include <gtest/gtest.h>

namespace {

using olive::AeadKey;
using olive::Sealed;

std::vector<uint8_t> payload(size_t size) {
  std::vector<uint8_t> bytes(size);
  for (size_t i = 0; i < size; ++i) bytes[i] = uint8_t(i * 37 + 11);
  return bytes;
}

TEST(SealTest, RoundTripAcrossSizes) {
  const AeadKey key{0x1111222233334444ull, 0x5555666677778888ull};
  for (const size_t size : {size_t(0), size_t(1), size_t(7), size_t(8), size_t(9), size_t(64)}) {
    const auto plain = payload(size);
    const Sealed sealed = olive::seal(plain, key, 3, 9);
    EXPECT_EQ(olive::open_sealed(sealed, key), plain) << "size " << size;
  }
}

TEST(SealTest, CiphertextHidesPlaintextAndIsDeterministic) {
  const AeadKey key{1, 2};
  const auto plain = payload(32);
  const Sealed a = olive::seal(plain, key, 0, 0);
  const Sealed b = olive::seal(plain, key, 0, 0);
  EXPECT_EQ(a.ciphertext, b.ciphertext);
  EXPECT_EQ(a.tag, b.tag);
  EXPECT_NE(a.ciphertext, plain);
}

TEST(SealTest, EveryFlippedByteIsRejected) {
  const AeadKey key{42, 43};
  const auto plain = payload(24);
  const Sealed sealed = olive::seal(plain, key, 5, 2);
  for (size_t i = 0; i < sealed.ciphertext.size(); ++i) {
    Sealed tampered = sealed;
    tampered.ciphertext[i] ^= 0x01;
    try {
      olive::open_sealed(tampered, key);
      FAIL() << "flipped byte " << i << " accepted";
    } catch (const std::runtime_error& e) {
      EXPECT_STREQ(e.what(), "authentication failure");
    }
  }
}

TEST(SealTest, WrongKeyAndWrongTagRejected) {
  const AeadKey key{7, 8};
  const Sealed sealed = olive::seal(payload(16), key, 1, 1);
  EXPECT_THROW(olive::open_sealed(sealed, AeadKey{7, 9}), std::runtime_error);
  Sealed bad_tag = sealed;
  bad_tag.tag ^= 1;
  EXPECT_THROW(olive::open_sealed(bad_tag, key), std::runtime_error);
}

TEST(SealTest, BindingToUserAndRound) {
  const AeadKey key{100, 200};
  const Sealed sealed = olive::seal(payload(16), key, 4, 7);
  Sealed as_other_user = sealed;
  as_other_user.user = 5;
  EXPECT_THROW(olive::open_sealed(as_other_user, key), std::runtime_error);
  Sealed as_other_round = sealed;
  as_other_round.round = 8;
  EXPECT_THROW(olive::open_sealed(as_other_round, key), std::runtime_error);
}

TEST(SealTest, KeystreamVariesWithUserRoundAndKey) {
  const auto plain = payload(16);
  const AeadKey key{9, 9};
  const Sealed base = olive::seal(plain, key, 1, 1);
  EXPECT_NE(olive::seal(plain, key, 2, 1).ciphertext, base.ciphertext);
  EXPECT_NE(olive::seal(plain, key, 1, 2).ciphertext, base.ciphertext);
  EXPECT_NE(olive::seal(plain, AeadKey{9, 10}, 1, 1).ciphertext, base.ciphertext);
}

TEST(SealTest, EmptyPayloadStillAuthenticated) {
  const AeadKey key{3, 4};
  const Sealed sealed = olive::seal({}, key, 0, 1);
  EXPECT_TRUE(olive::open_sealed(sealed, key).empty());
  Sealed tampered = sealed;
  tampered.round = 2;
  EXPECT_THROW(olive::open_sealed(tampered, key), std::runtime_error);
}

}  // namespace
