#include <gtest/gtest.h>

#include <cmath>

#include "mdepth/toytrain.hpp"

using namespace mdepth;

namespace {

SceneSpec shifted_stripes(double shift_px) {
  SceneSpec sp;
  sp.pattern = TexturePattern::Stripes;
  sp.seed = 3;
  sp.base_depth = 2.0;
  sp.pose_magnitude = shift_px * sp.base_depth / (sp.intrinsics.fx * sp.width);
  return sp;
}

}  // namespace

TEST(MakeScene, ZeroPoseCopiesTarget) {
  SceneSpec sp;
  sp.pose_magnitude = 0;
  const SyntheticScene sc = make_scene(sp);
  ASSERT_EQ(sc.sources.size(), 2u);
  EXPECT_EQ(sc.sources[0], sc.target);
  EXPECT_EQ(sc.sources[1], sc.target);
}

TEST(MakeScene, FrontoTranslationIsUniformShift) {
  SceneSpec sp;
  sp.base_depth = 2.0;
  sp.pose_magnitude = 0.03;
  const SyntheticScene sc = make_scene(sp);
  const double d = 2.0, tx = 0.03;
  const double shift = sp.intrinsics.fx * sp.width * tx / d;
  const Mat3 k = assemble_k(sc.gt_intrinsics, 64, 64);
  const PointCloud pc = backproject(sc.gt_depth, invert_k(k));
  const ParamGroups gt = sc.gt_params();
  const FlowGrid g = project(pc, k, gt.transform(1), 64, 64);
  for (int v = 0; v < 64; v += 7)
    for (int u = 0; u < 64; u += 5) {
      const std::size_t i = static_cast<std::size_t>(v) * 64 + u;
      EXPECT_NEAR(unnormalize_coord(g.x[i], 64) - u, shift, 1e-9);
      EXPECT_NEAR(unnormalize_coord(g.y[i], 64) - v, 0.0, 1e-9);
    }
}

TEST(MakeScene, IntegerShiftReproducesTarget) {
  const SyntheticScene sc = make_scene(shifted_stripes(4));
  for (int v = 0; v < 64; ++v)
    for (int u = 0; u + 4 < 64; ++u)
      for (int c = 0; c < 3; ++c) {
        EXPECT_NEAR(sc.sources[1].at(u + 4, v, c), sc.target.at(u, v, c), 1e-9);
        EXPECT_NEAR(sc.sources[0].at(u, v, c), sc.target.at(u + 4, v, c), 1e-9);
      }
}

TEST(MakeScene, DeterministicPerSeed) {
  SceneSpec sp;
  sp.profile = DepthProfile::TwoLayer;
  sp.seed = 17;
  const SyntheticScene a = make_scene(sp), b = make_scene(sp);
  EXPECT_EQ(a.target, b.target);
  EXPECT_EQ(a.sources[0], b.sources[0]);
  EXPECT_EQ(a.gt_depth, b.gt_depth);
  sp.seed = 18;
  EXPECT_NE(make_scene(sp).target, a.target);
}

TEST(MakeScene, DepthWithinRange) {
  for (auto prof : {DepthProfile::FrontoPlane, DepthProfile::SlantedPlane, DepthProfile::TwoLayer}) {
    SceneSpec sp;
    sp.profile = prof;
    const SyntheticScene sc = make_scene(sp);
    for (double z : sc.gt_depth.data()) {
      EXPECT_GT(z, sc.depth_range.min_depth);
      EXPECT_LT(z, sc.depth_range.max_depth);
    }
  }
}

TEST(MakeScene, Errors) {
  SceneSpec sp;
  sp.pose_magnitude = 0.5;
  EXPECT_THROW(make_scene(sp), PreconditionError);
  sp = {};
  sp.width = 8;
  EXPECT_THROW(make_scene(sp), PreconditionError);
  EXPECT_THROW(parse_profile("cube"), PreconditionError);
}

TEST(AdamW, FirstStepIsLearningRate) {
  ParamGroups p;
  p.inv_depth = Grid(1, 1, 1, 0.0);
  OptimState s(p);
  ParamGroups g = ParamGroups::zeros_like(p);
  g.inv_depth[0] = 1.0;
  AdamWConfig hyper;
  hyper.weight_decay = 0;
  adamw_step(s, g, hyper, 1e-3);
  EXPECT_NEAR(s.params[0], -1e-3, 1e-6 * 1e-3);
  EXPECT_EQ(s.step, 1);
}

TEST(AdamW, ZeroGradientAndDecay) {
  ParamGroups p;
  p.inv_depth = Grid(2, 1, 1, std::vector<double>{0.5, -2.0});
  p.pose = {Pose6{0.1, 0, 0, 1, 2, 3}};
  p.intrinsics_raw = {1, 2, 3, 4};
  const ParamGroups g = ParamGroups::zeros_like(p);
  AdamWConfig hyper;
  hyper.weight_decay = 0;
  OptimState a(p);
  adamw_step(a, g, hyper, 1e-2);
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_EQ(a.params[i], p[i]);
  hyper.weight_decay = 0.05;
  OptimState b(p);
  adamw_step(b, g, hyper, 1e-2);
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_DOUBLE_EQ(b.params[i], p[i] * (1 - 1e-2 * 0.05));
}

TEST(AdamW, MaskAndShapeChecks) {
  ParamGroups p;
  p.inv_depth = Grid(2, 1, 1, 1.0);
  OptimState s(p);
  ParamGroups g = ParamGroups::zeros_like(p);
  g.inv_depth[0] = g.inv_depth[1] = 1;
  std::vector<std::uint8_t> mask(p.size(), 0);
  mask[1] = 1;
  adamw_step(s, g, AdamWConfig{}, 1e-3, mask);
  EXPECT_EQ(s.params[0], 1.0);
  EXPECT_LT(s.params[1], 1.0);
  ParamGroups wrong;
  wrong.inv_depth = Grid(3, 1, 1);
  EXPECT_THROW(adamw_step(s, wrong, AdamWConfig{}, 1e-3), PreconditionError);
}

TEST(CosineLr, Examples) {
  EXPECT_EQ(cosine_lr(0, 100, 1e-4, 0), 1e-4);
  EXPECT_NEAR(cosine_lr(100, 100, 1e-4, 0), 0.0, 1e-20);
  EXPECT_NEAR(cosine_lr(50, 100, 1e-4, 2e-5), 6e-5, 1e-18);
  EXPECT_THROW(cosine_lr(101, 100, 1e-4, 0), PreconditionError);
}

TEST(FreeSet, Parse) {
  const FreeSet f = FreeSet::parse("depth,intrinsics");
  EXPECT_TRUE(f.depth);
  EXPECT_FALSE(f.pose);
  EXPECT_TRUE(f.intrinsics);
  const FreeSet t = FreeSet::parse("translation");
  EXPECT_TRUE(t.pose);
  EXPECT_FALSE(t.rotation);
  EXPECT_THROW(FreeSet::parse("depth,focal"), PreconditionError);
}

TEST(Optimize, ZeroStepsReturnsInitialization) {
  SceneSpec sp;
  const SyntheticScene sc = make_scene(sp);
  TrainConfig cfg;
  cfg.steps = 0;
  const FreeSet f = FreeSet::parse("depth,pose,intrinsics");
  const TrainResult r = optimize(sc, f, cfg);
  ASSERT_EQ(r.history.size(), 1u);
  const ParamGroups init = initial_params(sc, f, cfg);
  for (std::size_t i = 0; i < init.size(); ++i) EXPECT_EQ(r.params[i], init[i]);
  EXPECT_NEAR(r.params.disparity()[0], 0.3, 1e-15);
  EXPECT_NEAR(r.params.intrinsics().fy, 1.92, 1e-12);
  EXPECT_EQ(r.params.pose[0], Pose6{});
}

TEST(Optimize, FrozenAtGroundTruthHasLowLoss) {
  for (auto prof : {DepthProfile::FrontoPlane, DepthProfile::SlantedPlane, DepthProfile::TwoLayer}) {
    SceneSpec sp;
    sp.profile = prof;
    sp.rotation_fraction = 0.3;
    sp.translation_dir = Vec3(1, 0.3, 0.2);
    const SyntheticScene sc = make_scene(sp);
    TrainConfig cfg;
    cfg.steps = 3;
    const TrainResult r = optimize(sc, FreeSet{}, cfg);
    EXPECT_LT(r.history[0], 1e-3) << profile_name(prof);
    EXPECT_EQ(r.history[0], r.history[3]);
  }
}

TEST(Optimize, PhotometricGradientVanishesAtGroundTruth) {
  const SyntheticScene sc = make_scene(shifted_stripes(4));
  LossConfig loss;
  loss.lambda = 0;
  const WarpScene ws = sc.warp_scene(loss, 8);
  const LossAndGradient lg = loss_and_gradients(ws, sc.gt_params());
  EXPECT_LT(lg.loss, 1e-12);
  for (int v = 8; v < 56; ++v)
    for (int u = 8; u < 56; ++u) EXPECT_LT(std::abs(lg.grad.inv_depth.at(u, v)), 1e-6);
}

TEST(Optimize, ReproducibleAndDecreasing) {
  const SyntheticScene sc = make_scene(shifted_stripes(2));
  TrainConfig cfg;
  cfg.steps = 60;
  cfg.adamw.lr = 1e-2;
  const FreeSet f = FreeSet::parse("depth");
  const TrainResult a = optimize(sc, f, cfg), b = optimize(sc, f, cfg);
  EXPECT_EQ(a.history, b.history);
  EXPECT_EQ(a.params.inv_depth, b.params.inv_depth);
  EXPECT_EQ(a.history.size(), 61u);
  EXPECT_LT(a.history.back(), a.history.front());
}

TEST(Optimize, DivergenceReportsStep) {
  SceneSpec sp;
  const SyntheticScene sc = make_scene(sp);
  TrainConfig cfg;
  cfg.steps = 10;
  cfg.adamw.lr = 1e308;
  try {
    optimize(sc, FreeSet::parse("depth"), cfg);
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_GT(e.step(), 0);
    EXPECT_LE(e.step(), 10);
  }
}
