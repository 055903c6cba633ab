#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <set>

#include "mdepth/semantic.hpp"
#include "test_support.hpp"

using namespace mdepth;
using testing_support::random_grid;

namespace {

InstanceMask rect(int w, int h, int x0, int y0, int x1, int y1, double conf, int cls = 1) {
  InstanceMask m{Grid(w, h, 1), conf, cls};
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) m.mask.at(x, y) = 1.0;
  return m;
}

std::vector<InstanceMask> random_instances(std::mt19937_64& rng, int w, int h, int n) {
  std::vector<InstanceMask> out;
  for (int k = 0; k < n; ++k) {
    const int x0 = static_cast<int>(rng() % w), y0 = static_cast<int>(rng() % h);
    const int x1 = x0 + 1 + static_cast<int>(rng() % (w - x0)), y1 = y0 + 1 + static_cast<int>(rng() % (h - y0));
    const double conf = std::uniform_real_distribution<double>(0, 1)(rng);
    out.push_back(rect(w, h, x0, y0, x1, y1, conf, 1 + static_cast<int>(rng() % 30)));
  }
  return out;
}

}  // namespace

TEST(MergeMasks, ConfidenceThreshold) {
  const std::vector<InstanceMask> inst{rect(4, 4, 0, 0, 2, 2, 0.8), rect(4, 4, 2, 2, 4, 4, 0.6)};
  const Grid m = merge_masks(inst, AdjustConfig{});
  EXPECT_EQ(m, inst[0].mask);
}

TEST(MergeMasks, EmptyListAndClassFilter) {
  EXPECT_EQ(merge_masks({}, AdjustConfig{}, 3, 2), Grid(3, 2, 1));
  const std::vector<InstanceMask> inst{rect(4, 4, 0, 0, 4, 4, 0.9, 62)};  // chair
  EXPECT_EQ(merge_masks(inst, AdjustConfig{}), Grid(4, 4, 1));
}

TEST(MergeMasks, UnionMatchesBruteForce) {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 20; ++t) {
    const auto inst = random_instances(rng, 9, 7, 4);
    const AdjustConfig cfg;
    const Grid m = merge_masks(inst, cfg, 9, 7);
    for (int y = 0; y < 7; ++y)
      for (int x = 0; x < 9; ++x) {
        bool on = false;
        for (const auto& i : inst)
          on = on || (i.confidence >= 0.7 && cfg.class_allowlist.count(i.class_id) && i.mask.at(x, y) == 1.0);
        EXPECT_EQ(m.at(x, y), on ? 1.0 : 0.0);
      }
  }
}

TEST(MergeMasks, MonotoneInThreshold) {
  std::mt19937_64 rng(2);
  const auto inst = random_instances(rng, 10, 10, 8);
  Grid prev(10, 10, 1);
  for (double th = 1.0; th >= 0.0; th -= 0.05) {
    AdjustConfig cfg;
    cfg.confidence_threshold = std::max(th, 0.0);
    const Grid m = merge_masks(inst, cfg, 10, 10);
    for (std::size_t i = 0; i < m.size(); ++i) EXPECT_GE(m[i], prev[i]);
    prev = m;
  }
}

TEST(MergeMasks, Errors) {
  EXPECT_THROW(merge_masks({rect(4, 4, 0, 0, 1, 1, 0.9)}, AdjustConfig{}, 3, 4), PreconditionError);
  AdjustConfig bad;
  bad.confidence_threshold = 1.5;
  EXPECT_THROW(merge_masks({}, bad, 2, 2), PreconditionError);
}

TEST(AdjustDisparity, NoneIsIdentity) {
  std::mt19937_64 rng(3);
  const Grid d = random_grid(6, 6, 1, rng);
  AdjustConfig cfg;
  cfg.strategy = AdjustStrategy::None;
  EXPECT_EQ(adjust_disparity(d, random_instances(rng, 6, 6, 3), cfg), d);
}

TEST(AdjustDisparity, MedianOfThree) {
  const Grid d(3, 2, 1, std::vector<double>{0.3, 0.1, 0.2, 0.9, 0.5, 0.7});
  const Grid out = adjust_disparity(d, {rect(3, 2, 0, 0, 3, 1, 0.9)}, AdjustConfig{});
  EXPECT_EQ(out, Grid(3, 2, 1, std::vector<double>({0.2, 0.2, 0.2, 0.9, 0.5, 0.7})));
}

TEST(AdjustDisparity, EvenCountTakesLowerMiddle) {
  const Grid d(4, 1, 1, std::vector<double>{0.4, 0.1, 0.3, 0.2});
  const Grid out = adjust_disparity(d, {rect(4, 1, 0, 0, 4, 1, 0.9)}, AdjustConfig{});
  EXPECT_EQ(out, Grid(4, 1, 1, 0.2));
}

TEST(AdjustDisparity, DisjointMasksAreLocal) {
  std::mt19937_64 rng(4);
  const Grid d = random_grid(8, 8, 1, rng);
  const std::vector<InstanceMask> inst{rect(8, 8, 0, 0, 3, 3, 0.9), rect(8, 8, 5, 5, 8, 8, 0.95, 3)};
  const Grid out = adjust_disparity(d, inst, AdjustConfig{});
  for (const auto& m : inst) {
    std::vector<double> vals;
    for (std::size_t i = 0; i < d.size(); ++i)
      if (m.mask[i] == 1.0) vals.push_back(d[i]);
    std::sort(vals.begin(), vals.end());
    const double med = vals[(vals.size() - 1) / 2];
    for (std::size_t i = 0; i < d.size(); ++i)
      if (m.mask[i] == 1.0) { EXPECT_EQ(out[i], med); }
  }
  const Grid merged = merge_masks(inst, AdjustConfig{});
  for (std::size_t i = 0; i < d.size(); ++i)
    if (merged[i] == 0.0) { EXPECT_EQ(out[i], d[i]); }
  EXPECT_EQ(adjust_disparity(out, inst, AdjustConfig{}), out);
}

TEST(AdjustDisparity, LaterInstanceWinsOverlap) {
  const Grid d(4, 1, 1, std::vector<double>{0.1, 0.2, 0.8, 0.9});
  const std::vector<InstanceMask> inst{rect(4, 1, 0, 0, 3, 1, 0.9), rect(4, 1, 2, 0, 4, 1, 0.9)};
  // First: {0.1,0.2,0.8} -> 0.2; second from the original values {0.8,0.9} -> 0.8.
  EXPECT_EQ(adjust_disparity(d, inst, AdjustConfig{}), Grid(4, 1, 1, std::vector<double>({0.2, 0.2, 0.8, 0.8})));
}

TEST(AdjustDisparity, ValuesStayWithinOriginals) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 20; ++t) {
    const Grid d = random_grid(7, 5, 1, rng);
    const Grid out = adjust_disparity(d, random_instances(rng, 7, 5, 4), AdjustConfig{});
    const std::set<double> orig(d.data().begin(), d.data().end());
    for (double v : out.data()) EXPECT_TRUE(orig.count(v));
  }
}

TEST(AdjustDisparity, EmptyMaskSkippedAndShapeChecked) {
  const Grid d(3, 3, 1, 0.5);
  EXPECT_EQ(adjust_disparity(d, {InstanceMask{Grid(3, 3, 1), 0.9, 1}}, AdjustConfig{}), d);
  EXPECT_THROW(adjust_disparity(d, {InstanceMask{Grid(2, 3, 1), 0.9, 1}}, AdjustConfig{}), PreconditionError);
  EXPECT_THROW(adjust_disparity(d, {InstanceMask{Grid(3, 3, 1), 1.2, 1}}, AdjustConfig{}), PreconditionError);
}

TEST(AdjustDisparity, OverlapCanMoveAMedianOnReapplication) {
  const Grid d(4, 1, 1, std::vector<double>{0.1, 0.2, 0.3, 0.4});
  const std::vector<InstanceMask> inst{rect(4, 1, 0, 0, 3, 1, 0.9), rect(4, 1, 1, 0, 4, 1, 0.9)};
  const Grid once = adjust_disparity(d, inst, AdjustConfig{});
  EXPECT_EQ(once, Grid(4, 1, 1, std::vector<double>({0.2, 0.3, 0.3, 0.3})));
  EXPECT_EQ(adjust_disparity(once, inst, AdjustConfig{}), Grid(4, 1, 1, 0.3));
}
