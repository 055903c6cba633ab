#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "mdepth/upsample.hpp"
#include "test_support.hpp"

using namespace mdepth;
using testing_support::random_grid;
using testing_support::shuffle_oracle;

TEST(PixelShuffle, IdentityForFactorOne) {
  std::mt19937_64 rng(1);
  const Grid g = random_grid(5, 3, 4, rng);
  EXPECT_EQ(pixel_shuffle(g, 1), g);
  EXPECT_EQ(pixel_unshuffle(g, 1), g);
}

TEST(PixelShuffle, FourChannelsToTwoByTwo) {
  const Grid in(1, 1, 4, std::vector<double>{1, 2, 3, 4});
  const Grid want(2, 2, 1, std::vector<double>{1, 2, 3, 4});
  EXPECT_EQ(pixel_shuffle(in, 2), want);
  EXPECT_EQ(shuffle_oracle(in, 2), want);
  EXPECT_EQ(pixel_unshuffle(want, 2), in);
}

TEST(PixelShuffle, Shape) {
  const Grid out = pixel_shuffle(Grid(6, 4, 8), 2);
  EXPECT_EQ(out.channels(), 2);
  EXPECT_EQ(out.height(), 8);
  EXPECT_EQ(out.width(), 12);
}

TEST(PixelShuffle, MatchesIndexOracle) {
  std::mt19937_64 rng(2);
  for (int r : {1, 2, 3})
    for (int c : {1, 2}) {
      const Grid g = random_grid(4, 3, c * r * r, rng);
      EXPECT_EQ(pixel_shuffle(g, r), shuffle_oracle(g, r)) << "r " << r << " c " << c;
    }
}

TEST(PixelShuffle, RoundTripAndMultiset) {
  std::mt19937_64 rng(3);
  for (int r : {1, 2, 3})
    for (int t = 0; t < 10; ++t) {
      const Grid g = random_grid(1 + t % 4, 1 + t % 3, 2 * r * r, rng, -5, 5);
      const Grid s = pixel_shuffle(g, r);
      EXPECT_EQ(pixel_unshuffle(s, r), g);
      std::vector<double> a(g.data().begin(), g.data().end()), b(s.data().begin(), s.data().end());
      std::sort(a.begin(), a.end());
      std::sort(b.begin(), b.end());
      EXPECT_EQ(a, b);
    }
}

TEST(PixelShuffle, Errors) {
  EXPECT_THROW(pixel_shuffle(Grid(2, 2, 5), 3), PreconditionError);
  EXPECT_THROW(pixel_shuffle(Grid(2, 2, 4), 0), PreconditionError);
  EXPECT_THROW(pixel_unshuffle(Grid(3, 2, 1), 2), PreconditionError);
}

TEST(NearestUpsample, Examples) {
  std::mt19937_64 rng(4);
  const Grid g = random_grid(3, 2, 2, rng);
  EXPECT_EQ(nearest_upsample(g, 1), g);
  EXPECT_EQ(nearest_upsample(Grid(1, 1, 1, 7.0), 2), Grid(2, 2, 1, 7.0));
  EXPECT_EQ(nearest_upsample(Grid(2, 1, 1, std::vector<double>{1, 2}), 2),
            Grid(4, 2, 1, std::vector<double>({1, 1, 2, 2, 1, 1, 2, 2})));
  EXPECT_THROW(nearest_upsample(g, 0), PreconditionError);
}

TEST(NearestUpsample, PreservesExtremes) {
  std::mt19937_64 rng(5);
  for (int f : {2, 3, 4}) {
    const Grid g = random_grid(5, 4, 3, rng, -2, 2);
    const Grid u = nearest_upsample(g, f);
    EXPECT_EQ(*std::min_element(u.data().begin(), u.data().end()), *std::min_element(g.data().begin(), g.data().end()));
    EXPECT_EQ(*std::max_element(u.data().begin(), u.data().end()), *std::max_element(g.data().begin(), g.data().end()));
  }
}
