#pragma once

// Synthetic frame triplets with known depth, pose and intrinsics, and an
// AdamW loop that recovers them by minimizing the view-synthesis loss.

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mdepth/autodiff.hpp"
#include "mdepth/error.hpp"
#include "mdepth/geometry.hpp"
#include "mdepth/grid.hpp"
#include "mdepth/losses.hpp"

namespace mdepth {

enum class DepthProfile { FrontoPlane, SlantedPlane, TwoLayer };

inline const char* profile_name(DepthProfile p) {
  switch (p) {
    case DepthProfile::FrontoPlane: return "fronto";
    case DepthProfile::SlantedPlane: return "slanted";
    case DepthProfile::TwoLayer: return "two-layer";
  }
  return "?";
}

inline DepthProfile parse_profile(const std::string& s) {
  if (s == "fronto" || s == "fronto-plane") return DepthProfile::FrontoPlane;
  if (s == "slanted" || s == "slanted-plane") return DepthProfile::SlantedPlane;
  if (s == "two-layer") return DepthProfile::TwoLayer;
  throw PreconditionError("unknown depth profile '" + s + "' (fronto, slanted, two-layer)");
}

/// Sinusoids: random orientations up to texture_freq. Stripes: horizontal
/// periods of 4 and 8 pixels with row-dependent phase, so every 8x8 block
/// averages to the same value.
enum class TexturePattern { Sinusoids, Stripes };

struct SceneSpec {
  int width = 64;
  int height = 64;
  DepthProfile profile = DepthProfile::FrontoPlane;
  double pose_magnitude = 0.05;         // translation length, scene units
  Vec3 translation_dir{1.0, 0.0, 0.0};  // normalized internally
  double rotation_fraction = 0.0;       // rotation angle = fraction * pose_magnitude (rad), about the y axis
  TexturePattern pattern = TexturePattern::Sinusoids;
  double texture_freq = 0.01;           // highest texture frequency, cycles per pixel
  std::uint64_t seed = 0;
  Intrinsics intrinsics = kBaselineIntrinsics;
  DepthRange depth_range{0.1, 100.0};
  double base_depth = 1.0;
  double slant = 0.25;       // slanted plane: Z + slant * Y = base_depth
  double foreground = 0.6;   // two-layer: foreground depth as a fraction of base_depth
};

/// Frames are generated for the sources {t-1, t+1}; t-1 moves opposite to t+1.
struct SyntheticScene {
  Grid target;
  std::vector<Grid> sources;     // I_{t-1}, I_{t+1}
  std::vector<Grid> coverage;    // 1 where the source pixel sees the target frame
  Grid gt_depth;
  std::vector<Pose6> gt_pose;    // T_{t->t'} as axis-angle + translation
  Intrinsics gt_intrinsics;
  DepthRange depth_range;

  WarpScene warp_scene(const LossConfig& loss = {}, int interior_margin = 2) const {
    WarpScene s;
    s.target = target;
    s.sources = sources;
    s.loss = loss;
    s.depth_range = depth_range;
    s.padding = Padding::Border;
    s.interior_margin = interior_margin;
    return s;
  }

  ParamGroups gt_params() const {
    ParamGroups p;
    p.inv_depth = gt_depth;
    for (double& v : p.inv_depth.data()) v = logit(depth_range.disparity(v));
    p.pose = gt_pose;
    p.intrinsics_raw = gt_intrinsics.to_raw();
    return p;
  }
};

/// The same scene restricted to the listed source frames (0 = t-1, 1 = t+1).
inline SyntheticScene select_sources(const SyntheticScene& scene, const std::vector<int>& which) {
  if (which.empty()) throw PreconditionError("at least one source frame must be selected");
  SyntheticScene out = scene;
  out.sources.clear();
  out.coverage.clear();
  out.gt_pose.clear();
  for (int j : which) {
    if (j < 0 || static_cast<std::size_t>(j) >= scene.sources.size())
      throw PreconditionError("source index " + std::to_string(j) + " out of range");
    out.sources.push_back(scene.sources[j]);
    out.coverage.push_back(scene.coverage[j]);
    out.gt_pose.push_back(scene.gt_pose[j]);
  }
  return out;
}

namespace detail {

inline Grid procedural_texture(int w, int h, double freq, std::mt19937_64& rng) {
  Grid g(w, h, 3);
  for (int c = 0; c < 3; ++c) {
    constexpr int kWaves = 6;
    std::array<double, kWaves> kx{}, ky{}, ph{};
    for (int k = 0; k < kWaves; ++k) {
      const double f = freq * (0.5 + 0.5 * uniform01(rng));
      const double ang = 2 * M_PI * uniform01(rng);
      kx[k] = f * std::cos(ang);
      ky[k] = f * std::sin(ang);
      ph[k] = 2 * M_PI * uniform01(rng);
    }
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double v = 0;
        for (int k = 0; k < kWaves; ++k) v += std::sin(2 * M_PI * (kx[k] * x + ky[k] * y) + ph[k]);
        g.at(x, y, c) = 0.5 + 0.4 * v / kWaves * 2.0;
      }
  }
  for (double& v : g.data()) v = std::clamp(v, 0.05, 0.95);
  return g;
}

inline Grid stripe_texture(int w, int h, std::mt19937_64& rng) {
  Grid g(w, h, 3);
  for (int c = 0; c < 3; ++c) {
    std::array<double, 2> amp{}, ph{}, wob{}, wob_ph{};
    for (int k = 0; k < 2; ++k) {
      amp[k] = 0.1 + 0.1 * uniform01(rng);
      ph[k] = 2 * M_PI * uniform01(rng);
      wob[k] = 1.5 * uniform01(rng);
      wob_ph[k] = 2 * M_PI * uniform01(rng);
    }
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double v = 0.5;
        for (int k = 0; k < 2; ++k) {
          const double period = k == 0 ? 4.0 : 8.0;
          v += amp[k] * std::sin(2 * M_PI * x / period + ph[k] + wob[k] * std::sin(2 * M_PI * y / 16.0 + wob_ph[k]));
        }
        g.at(x, y, c) = v;
      }
  }
  return g;
}

struct Surface {
  const SceneSpec& spec;
  Mat3 k, k_inv;

  bool in_foreground(double rx, double ry) const { return std::abs(rx) < 0.25 && std::abs(ry) < 0.25; }

  // Depth along the optical axis of frame t for the ray K^-1 (u, v, 1).
  double depth_at(const Vec3& ray) const {
    switch (spec.profile) {
      case DepthProfile::FrontoPlane: return spec.base_depth;
      case DepthProfile::SlantedPlane: return spec.base_depth / (1.0 + spec.slant * ray.y());
      case DepthProfile::TwoLayer:
        return in_foreground(ray.x(), ray.y()) ? spec.foreground * spec.base_depth : spec.base_depth;
    }
    return spec.base_depth;
  }

  // First hit of the ray o + lambda d (frame t coordinates), lambda > 0.
  bool intersect(const Vec3& o, const Vec3& d, Vec3& hit) const {
    auto plane = [&](const Vec3& n, double off, double& lambda) {
      const double den = n.dot(d);
      if (std::abs(den) < 1e-12) return false;
      lambda = (off - n.dot(o)) / den;
      return lambda > 0;
    };
    double lambda = 0;
    switch (spec.profile) {
      case DepthProfile::FrontoPlane:
        if (!plane(Vec3(0, 0, 1), spec.base_depth, lambda)) return false;
        break;
      case DepthProfile::SlantedPlane:
        if (!plane(Vec3(0, spec.slant, 1), spec.base_depth, lambda)) return false;
        break;
      case DepthProfile::TwoLayer: {
        double lf = 0;
        if (plane(Vec3(0, 0, 1), spec.foreground * spec.base_depth, lf)) {
          const Vec3 p = o + lf * d;
          if (in_foreground(p.x() / p.z(), p.y() / p.z())) {
            hit = p;
            return true;
          }
        }
        if (!plane(Vec3(0, 0, 1), spec.base_depth, lambda)) return false;
        break;
      }
    }
    hit = o + lambda * d;
    return hit.z() > 0;
  }
};

}  // namespace detail

inline SyntheticScene make_scene(const SceneSpec& spec) {
  if (spec.width < 16 || spec.height < 16) throw PreconditionError("synthetic scenes need at least 16x16 pixels");
  spec.depth_range.validate();
  if (!(spec.pose_magnitude >= 0)) throw PreconditionError("pose magnitude must be non-negative");
  if (!(spec.texture_freq > 0 && spec.texture_freq <= 0.5)) throw PreconditionError("texture frequency must lie in (0, 0.5]");
  if (!(spec.base_depth > 0)) throw PreconditionError("base depth must be positive");
  if (spec.translation_dir.norm() == 0) throw PreconditionError("translation direction must be non-zero");
  const int w = spec.width, h = spec.height;

  std::mt19937_64 rng(spec.seed);
  SyntheticScene sc;
  sc.gt_intrinsics = spec.intrinsics;
  sc.depth_range = spec.depth_range;
  sc.target = spec.pattern == TexturePattern::Stripes ? detail::stripe_texture(w, h, rng)
                                                      : detail::procedural_texture(w, h, spec.texture_freq, rng);

  detail::Surface surf{spec, assemble_k(spec.intrinsics, w, h), Mat3::Identity()};
  surf.k_inv = invert_k(surf.k);
  sc.gt_depth = Grid(w, h, 1);
  for (int v = 0; v < h; ++v)
    for (int u = 0; u < w; ++u) {
      const double z = surf.depth_at(surf.k_inv * Vec3(u, v, 1.0));
      if (!(z > spec.depth_range.min_depth && z < spec.depth_range.max_depth))
        throw PreconditionError("scene depth " + std::to_string(z) + " falls outside the depth range");
      sc.gt_depth.at(u, v) = z;
    }

  const Vec3 t = spec.translation_dir.normalized() * spec.pose_magnitude;
  const Vec3 omega(0.0, spec.rotation_fraction * spec.pose_magnitude, 0.0);
  for (double sign : {-1.0, 1.0}) {
    const Pose6 pose{sign * omega.x(), sign * omega.y(), sign * omega.z(), sign * t.x(), sign * t.y(), sign * t.z()};
    sc.gt_pose.push_back(pose);
    const RigidTransform tf = compose_transform(sign * omega, sign * t);
    Grid frame(w, h, 3), cover(w, h, 1);
    if (spec.pose_magnitude == 0.0) {
      frame = sc.target;
      cover = Grid(w, h, 1, 1.0);
    } else {
      const Vec3 origin = -(tf.rotation.transpose() * tf.translation);
      std::size_t covered = 0;
      for (int v = 0; v < h; ++v)
        for (int u = 0; u < w; ++u) {
          const Vec3 dir = tf.rotation.transpose() * (surf.k_inv * Vec3(u, v, 1.0));
          Vec3 hit;
          if (!surf.intersect(origin, dir, hit)) throw PreconditionError("source ray misses the scene surface");
          const Vec3 q = surf.k * hit;
          const double su = q.x() / q.z(), sv = q.y() / q.z();
          if (su >= 0 && su <= w - 1 && sv >= 0 && sv <= h - 1) {
            cover.at(u, v) = 1.0;
            ++covered;
          }
          for (int c = 0; c < 3; ++c) frame.at(u, v, c) = sample_pixel(sc.target, su, sv, c, Padding::Border);
        }
      const double frac = static_cast<double>(covered) / static_cast<double>(frame.pixel_count());
      if (frac < 0.9)
        throw PreconditionError("pose too large: only " + std::to_string(100 * frac) +
                                "% of source pixels see the target frame (need 90%)");
    }
    sc.sources.push_back(std::move(frame));
    sc.coverage.push_back(std::move(cover));
  }
  return sc;
}

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 5e-2;
  double lr_min = 0.0;
  bool cosine = true;

  void validate() const {
    if (!(lr >= 0 && lr_min >= 0)) throw PreconditionError("learning rates must be non-negative");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw PreconditionError("Adam betas must lie in [0, 1)");
    if (!(eps > 0)) throw PreconditionError("Adam epsilon must be positive");
    if (!(weight_decay >= 0)) throw PreconditionError("weight decay must be non-negative");
  }
};

struct OptimState {
  ParamGroups params;
  std::vector<double> m, v;  // flat, same length as params
  int step = 0;

  explicit OptimState(ParamGroups p) : params(std::move(p)), m(params.size(), 0.0), v(params.size(), 0.0) {}
};

/// One AdamW update at learning rate `lr`. Coordinates with active[i] == 0
/// are left untouched (no decay, no moment update).
inline void adamw_step(OptimState& s, const ParamGroups& grad, const AdamWConfig& hyper, double lr,
                       std::span<const std::uint8_t> active = {}) {
  const std::size_t n = s.params.size();
  if (grad.size() != n || s.m.size() != n || s.v.size() != n ||
      grad.inv_depth.width() != s.params.inv_depth.width() || grad.pose.size() != s.params.pose.size())
    throw PreconditionError("adamw_step: gradient shape does not match the parameters");
  if (!active.empty() && active.size() != n) throw PreconditionError("adamw_step: mask length mismatch");
  ++s.step;
  const double bc1 = 1 - std::pow(hyper.beta1, s.step);
  const double bc2 = 1 - std::pow(hyper.beta2, s.step);
  for (std::size_t i = 0; i < n; ++i) {
    if (!active.empty() && !active[i]) continue;
    double& theta = s.params[i];
    const double g = grad[i];
    theta -= lr * hyper.weight_decay * theta;
    s.m[i] = hyper.beta1 * s.m[i] + (1 - hyper.beta1) * g;
    s.v[i] = hyper.beta2 * s.v[i] + (1 - hyper.beta2) * g * g;
    const double mh = s.m[i] / bc1, vh = s.v[i] / bc2;
    theta -= lr * mh / (std::sqrt(vh) + hyper.eps);
  }
}

inline double cosine_lr(int step, int total_steps, double lr0, double lr_min) {
  if (total_steps < 0 || step < 0 || step > total_steps)
    throw PreconditionError("cosine_lr needs 0 <= step <= total_steps");
  if (total_steps == 0) return lr0;
  return lr_min + (lr0 - lr_min) * (1 + std::cos(M_PI * step / total_steps)) / 2;
}

struct FreeSet {
  bool depth = false;
  bool pose = false;
  bool intrinsics = false;
  bool rotation = true;  // with pose free: false keeps R at its initial value

  static FreeSet parse(const std::string& list) {
    FreeSet f;
    std::size_t pos = 0;
    while (pos <= list.size()) {
      const std::size_t end = std::min(list.find(',', pos), list.size());
      const std::string item = list.substr(pos, end - pos);
      if (item == "depth") f.depth = true;
      else if (item == "pose") f.pose = true;
      else if (item == "intrinsics") f.intrinsics = true;
      else if (item == "translation") f.pose = true, f.rotation = false;
      else if (!item.empty() && item != "none") throw PreconditionError("unknown parameter group '" + item + "'");
      pos = end + 1;
    }
    return f;
  }
};

struct TrainConfig {
  LossConfig loss;
  AdamWConfig adamw;
  int steps = 2000;
  int interior_margin = 2;
  double init_disparity = 0.3;
  Intrinsics init_intrinsics = kBaselineIntrinsics;
};

struct TrainResult {
  ParamGroups params;
  std::vector<double> history;  // loss before each update, plus the final loss
};

/// Free groups start from the fixed initialization, frozen ones at ground truth.
inline ParamGroups initial_params(const SyntheticScene& scene, const FreeSet& free, const TrainConfig& cfg) {
  ParamGroups p = scene.gt_params();
  if (free.depth) p.inv_depth = Grid(p.inv_depth.width(), p.inv_depth.height(), 1, logit(cfg.init_disparity));
  if (free.pose)
    for (Pose6& q : p.pose) {
      if (free.rotation) q = Pose6{};
      else q[3] = q[4] = q[5] = 0.0;
    }
  if (free.intrinsics) p.intrinsics_raw = cfg.init_intrinsics.to_raw();
  return p;
}

inline std::vector<std::uint8_t> active_mask(const ParamGroups& p, const FreeSet& free) {
  std::vector<std::uint8_t> m(p.size(), 0);
  for (std::size_t i = 0; i < p.size(); ++i) {
    switch (p.group(i)) {
      case ParamGroup::InvDepth: m[i] = free.depth; break;
      case ParamGroup::Pose: {
        const std::size_t k = (i - p.range(ParamGroup::Pose).first) % 6;
        m[i] = free.pose && (free.rotation || k >= 3);
        break;
      }
      case ParamGroup::Intrinsics: m[i] = free.intrinsics; break;
    }
  }
  return m;
}

inline TrainResult optimize(const SyntheticScene& scene, const FreeSet& free, const TrainConfig& cfg) {
  if (cfg.steps < 0) throw PreconditionError("steps must be non-negative");
  cfg.adamw.validate();
  const WarpScene ws = scene.warp_scene(cfg.loss, cfg.interior_margin);
  OptimState state(initial_params(scene, free, cfg));
  const auto mask = active_mask(state.params, free);
  TrainResult r;
  r.history.reserve(static_cast<std::size_t>(cfg.steps) + 1);
  for (int k = 0;; ++k) {
    for (std::size_t i = 0; i < state.params.size(); ++i)
      if (!std::isfinite(state.params[i]))
        throw DivergenceError("parameters became non-finite at step " + std::to_string(k), k);
    const LossAndGradient lg = loss_and_gradients(ws, state.params);
    if (!std::isfinite(lg.loss)) throw DivergenceError("loss became non-finite at step " + std::to_string(k), k);
    r.history.push_back(lg.loss);
    if (k == cfg.steps) break;
    const double lr = cfg.adamw.cosine ? cosine_lr(k, cfg.steps, cfg.adamw.lr, cfg.adamw.lr_min) : cfg.adamw.lr;
    adamw_step(state, lg.grad, cfg.adamw, lr, mask);
  }
  r.params = std::move(state.params);
  return r;
}

/// Depth recovered from disparity logits.
inline Grid recovered_depth(const ParamGroups& p, const DepthRange& range) {
  Grid d = p.disparity();
  for (double& v : d.data()) v = range.depth(v);
  return d;
}

}  // namespace mdepth
