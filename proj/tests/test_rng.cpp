#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "bayesgrid/rng.hpp"

using namespace bayesgrid;

TEST(Philox, KnownAnswerZero) {
  const auto out = philox4x32_10({0, 0, 0, 0}, {0, 0});
  EXPECT_EQ(out, (Philox4x32Block{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u}));
}

TEST(Philox, KnownAnswerAllOnes) {
  const auto out = philox4x32_10({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu}, {0xffffffffu, 0xffffffffu});
  EXPECT_EQ(out, (Philox4x32Block{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu}));
}

TEST(Philox, KnownAnswerPi) {
  const auto out = philox4x32_10({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u}, {0xa4093822u, 0x299f31d0u});
  EXPECT_EQ(out, (Philox4x32Block{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u}));
}

TEST(RngStream, SameSeedAndStreamReproduce) {
  RngStream a(42, StreamTag::kScenario, 7), b(42, StreamTag::kScenario, 7);
  for (int i = 0; i < 1000; ++i) ASSERT_EQ(a(), b());
}

TEST(RngStream, DistinctTagsAndIndicesDiffer) {
  std::set<std::uint32_t> firsts;
  for (auto tag : {StreamTag::kScenario, StreamTag::kCollateral, StreamTag::kBenchmark})
    for (std::uint64_t i = 0; i < 10; ++i) firsts.insert(RngStream(1, tag, i)());
  EXPECT_EQ(firsts.size(), 30u);
}

TEST(RngStream, UniformStaysInsideOpenInterval) {
  RngStream rng(3, StreamTag::kGeneric, 0);
  double sum = 0.0;
  for (int i = 0; i < 100000; ++i) {
    const double u = rng.uniform();
    ASSERT_GT(u, 0.0);
    ASSERT_LT(u, 1.0);
    sum += u;
  }
  EXPECT_NEAR(sum / 100000, 0.5, 3.0 * std::sqrt(1.0 / 12.0 / 100000));
}

TEST(RngStream, NormalMomentsWithinThreeStandardErrors) {
  RngStream rng(11, StreamTag::kGeneric, 1);
  const int n = 200000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    s += z;
    s2 += z * z;
  }
  EXPECT_NEAR(s / n, 0.0, 3.0 / std::sqrt(n));
  EXPECT_NEAR(s2 / n, 1.0, 3.0 * std::sqrt(2.0 / n));
}

TEST(RngStream, StreamIdPacksTagAboveIndex) {
  EXPECT_EQ(stream_id(StreamTag::kBenchmark, 5), (std::uint64_t{8} << 48) | 5);
}
