#pragma once

// Exact gradients of the multi-scale view-synthesis loss with respect to
// per-pixel disparity logits, per-source 6-DoF poses and the four intrinsics.
//
// The forward pass is written once and instrumented with a BranchLog. Every
// non-smooth decision it takes (projection validity, bilinear cell, border
// clamp, |.| sign, SSIM clamp, min-reprojection winner, median position) goes
// through BranchLog::decide, which lets the gradient checker
//   - detect coordinates whose +-10h neighbourhood crosses a kink, and
//   - re-evaluate the loss with every decision frozen at the base point.
//
// The backward pass is a hand-written adjoint of the same forward pass and
// only reads decisions recorded there.

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mdepth/error.hpp"
#include "mdepth/geometry.hpp"
#include "mdepth/grid.hpp"
#include "mdepth/losses.hpp"
#include "mdepth/semantic.hpp"

namespace mdepth {

/// Everything the loss depends on besides the optimized parameters.
struct WarpScene {
  Grid target;                  // I_t
  std::vector<Grid> sources;    // I_t' for each source frame
  LossConfig loss;
  DepthRange depth_range;
  Padding padding = Padding::Border;
  int interior_margin = 0;      // full-resolution pixels excluded from L_p; ceil(m / 2^s) at scale s
  std::vector<InstanceMask> instances;  // optional semantic adjustment (full resolution)
  AdjustConfig adjust;
};

enum class ParamGroup { InvDepth, Pose, Intrinsics };

inline const char* group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::InvDepth: return "inv_depth";
    case ParamGroup::Pose: return "pose";
    case ParamGroup::Intrinsics: return "intrinsics";
  }
  return "?";
}

using Pose6 = std::array<double, 6>;  // axis-angle (rad), translation

/// Optimizable parameters. Disparity is stored as logits (disp = sigmoid(x)),
/// focal lengths pre-softplus. The same layout carries gradients.
struct ParamGroups {
  Grid inv_depth;
  std::vector<Pose6> pose;
  std::array<double, 4> intrinsics_raw{};

  std::size_t size() const { return inv_depth.size() + 6 * pose.size() + 4; }

  double& operator[](std::size_t i) {
    if (i < inv_depth.size()) return inv_depth[i];
    i -= inv_depth.size();
    if (i < 6 * pose.size()) return pose[i / 6][i % 6];
    return intrinsics_raw.at(i - 6 * pose.size());
  }
  double operator[](std::size_t i) const { return const_cast<ParamGroups&>(*this)[i]; }

  ParamGroup group(std::size_t i) const {
    if (i < inv_depth.size()) return ParamGroup::InvDepth;
    if (i < inv_depth.size() + 6 * pose.size()) return ParamGroup::Pose;
    return ParamGroup::Intrinsics;
  }
  std::pair<std::size_t, std::size_t> range(ParamGroup g) const {
    const std::size_t a = inv_depth.size(), b = a + 6 * pose.size();
    switch (g) {
      case ParamGroup::InvDepth: return {0, a};
      case ParamGroup::Pose: return {a, b};
      case ParamGroup::Intrinsics: return {b, b + 4};
    }
    return {0, 0};
  }

  Grid disparity() const {
    Grid d = inv_depth;
    for (double& v : d.data()) v = sigmoid(v);
    return d;
  }
  Intrinsics intrinsics() const { return Intrinsics::from_raw(intrinsics_raw); }
  RigidTransform transform(std::size_t j) const {
    const Pose6& p = pose.at(j);
    return compose_transform(Vec3(p[0], p[1], p[2]), Vec3(p[3], p[4], p[5]));
  }

  static ParamGroups zeros_like(const ParamGroups& p) {
    ParamGroups z;
    z.inv_depth = Grid(p.inv_depth.width(), p.inv_depth.height(), 1);
    z.pose.assign(p.pose.size(), Pose6{});
    return z;
  }
};

/// Records or replays the discrete decisions of one forward evaluation.
class BranchLog {
 public:
  enum class Mode { Record, Replay };

  BranchLog() = default;
  static BranchLog replaying(const BranchLog& recorded) {
    BranchLog b;
    b.mode_ = Mode::Replay;
    b.decisions_ = recorded.decisions_;
    return b;
  }

  int decide(int natural) {
    if (mode_ == Mode::Record) {
      decisions_.push_back(natural);
      return natural;
    }
    if (cursor_ >= decisions_.size()) throw Error("branch replay ran past the recorded decisions");
    return decisions_[cursor_++];
  }

  Mode mode() const noexcept { return mode_; }
  const std::vector<int>& decisions() const noexcept { return decisions_; }
  bool same_path(const BranchLog& o) const { return decisions_ == o.decisions_; }

 private:
  Mode mode_ = Mode::Record;
  std::vector<int> decisions_;
  std::size_t cursor_ = 0;
};

namespace detail {

inline int sign_of(double v) { return (v > 0) - (v < 0); }

// Residuals this small are resampling roundoff of an exact match and take the zero subgradient.
inline constexpr double kL1Deadband = 1e-12;

inline int l1_sign_of(double v) { return std::abs(v) <= kL1Deadband ? 0 : sign_of(v); }

inline void validate(const WarpScene& scene, const ParamGroups& p) {
  scene.loss.validate();
  scene.depth_range.validate();
  if (scene.target.empty()) throw PreconditionError("scene has no target image");
  if (scene.sources.empty()) throw PreconditionError("scene needs at least one source frame");
  for (const Grid& s : scene.sources)
    if (!s.same_shape(scene.target)) throw PreconditionError("source frame shape differs from the target");
  const int div = 1 << (scene.loss.num_levels() - 1);
  if (scene.target.width() % div || scene.target.height() % div)
    throw PreconditionError("target size is not divisible by 2^" + std::to_string(scene.loss.num_levels() - 1));
  if (scene.target.width() / div < 2 || scene.target.height() / div < 2)
    throw PreconditionError("coarsest loss scale must be at least 2x2");
  if (scene.interior_margin < 0) throw PreconditionError("interior margin must be non-negative");
  if (p.inv_depth.channels() != 1 || !p.inv_depth.same_size(scene.target))
    throw PreconditionError("inv_depth must be a 1-channel grid matching the target");
  if (p.pose.size() != scene.sources.size()) throw PreconditionError("one pose per source frame is required");
  for (std::size_t i = 0; i < p.size(); ++i)
    if (!std::isfinite(p[i])) throw PreconditionError("parameter " + std::to_string(i) + " is not finite");
  for (const Pose6& q : p.pose)
    if (Vec3(q[0], q[1], q[2]).norm() >= M_PI) throw PreconditionError("axis-angle magnitude must stay below pi");
}

struct WarpSample {
  bool valid = false;
  double u = 0, v = 0;  // sampling position in source pixels
  BilinearTaps taps;
  Vec3 ray, point, moved;  // K^-1 (u, v, 1), z * ray, R P + t
};

struct SourceTrace {
  Grid warped;
  std::vector<WarpSample> samples;
  Grid pe;
  std::vector<int> dssim_state;  // 0 pass, 1 clamped low, 2 clamped high
  std::vector<int> l1_sign;      // per pixel and channel
  std::vector<SsimMoments> moments;
};

struct ScaleTrace {
  int scale = 0;
  int width = 0, height = 0;
  Grid disp_rep, disp_sm, depth;
  double fxp = 0, fyp = 0, cxp = 0, cyp = 0;
  std::vector<SourceTrace> src;
  std::vector<int> winner;
  std::vector<std::uint8_t> interior;
  std::size_t interior_count = 0;
  std::vector<int> sx_sign, sy_sign;
  std::vector<double> sx_weight, sy_weight;
  double disp_mean = 0;
};

class Pipeline {
 public:
  Pipeline(const WarpScene& scene, const ParamGroups& params) : scene_(scene), params_(params) {
    validate(scene, params);
    levels_ = scene.loss.num_levels();
    target_pyr_ = build_pyramid(scene.target, levels_);
    for (const Grid& s : scene.sources) source_pyr_.push_back(build_pyramid(s, levels_));
  }

  LossBreakdown forward(BranchLog* log) {
    log_ = log;
    const auto& cfg = scene_.loss;
    disp_ = params_.disparity();
    if (!scene_.instances.empty()) {
      const auto natural = adjustment_sources(disp_, scene_.instances, scene_.adjust);
      gather_.resize(natural.size());
      for (std::size_t i = 0; i < natural.size(); ++i)
        gather_[i] = static_cast<std::size_t>(decide(static_cast<int>(natural[i])));
    } else {
      gather_.clear();
    }
    Grid rep = disp_;
    if (!gather_.empty())
      for (std::size_t i = 0; i < rep.size(); ++i) rep[i] = disp_[gather_[i]];
    const Grid& sm = (!gather_.empty() && scene_.adjust.apply_to_smoothness) ? rep : disp_;
    const Pyramid rep_pyr = build_pyramid(rep, levels_);
    const Pyramid sm_pyr = build_pyramid(sm, levels_);

    intr_ = params_.intrinsics();
    transforms_.clear();
    for (std::size_t j = 0; j < params_.pose.size(); ++j) transforms_.push_back(params_.transform(j));

    LossBreakdown out;
    traces_.clear();
    for (int s : cfg.scales) {
      ScaleTrace& tr = traces_.emplace_back();
      forward_scale(tr, s, rep_pyr[s], sm_pyr[s]);
      out.per_scale.push_back({tr_lp_, tr_ls_});
      if (out.min_error_map.empty() || s <= finest_) {
        finest_ = s;
        out.min_error_map = last_min_map_;
      }
    }
    out.total = combine_scales(out.per_scale, cfg);
    return out;
  }

  ParamGroups backward() const;

 private:
  int decide(int natural) { return log_ ? log_->decide(natural) : natural; }

  void forward_scale(ScaleTrace& tr, int s, const Grid& disp_rep, const Grid& disp_sm);

  const WarpScene& scene_;
  const ParamGroups& params_;
  int levels_ = 1;
  Pyramid target_pyr_;
  std::vector<Pyramid> source_pyr_;
  BranchLog* log_ = nullptr;
  Grid disp_;
  std::vector<std::size_t> gather_;
  Intrinsics intr_;
  std::vector<RigidTransform> transforms_;
  std::vector<ScaleTrace> traces_;
  double tr_lp_ = 0, tr_ls_ = 0;
  Grid last_min_map_;
  int finest_ = 0;
};

inline void Pipeline::forward_scale(ScaleTrace& tr, int s, const Grid& disp_rep, const Grid& disp_sm) {
  const auto& cfg = scene_.loss;
  const Grid& target = target_pyr_[s];
  const int w = target.width(), h = target.height(), ch = target.channels();
  const std::size_t n = target.pixel_count();
  tr.scale = s;
  tr.width = w;
  tr.height = h;
  tr.disp_rep = disp_rep;
  tr.disp_sm = disp_sm;
  tr.depth = disp_rep;
  for (double& d : tr.depth.data()) d = scene_.depth_range.depth(d);

  const Mat3 k = assemble_k(intr_, scene_.target.width(), scene_.target.height(), s);
  const Mat3 k_inv = invert_k(k);
  tr.fxp = k(0, 0);
  tr.fyp = k(1, 1);
  tr.cxp = k(0, 2);
  tr.cyp = k(1, 2);

  for (std::size_t j = 0; j < source_pyr_.size(); ++j) {
    const Grid& source = source_pyr_[j][s];
    const RigidTransform& t = transforms_[j];
    SourceTrace& st = tr.src.emplace_back();
    st.warped = Grid(w, h, ch);
    st.samples.resize(n);
    for (int v = 0; v < h; ++v)
      for (int u = 0; u < w; ++u) {
        const std::size_t i = static_cast<std::size_t>(v) * w + u;
        WarpSample& ws = st.samples[i];
        ws.ray = k_inv * Vec3(u, v, 1.0);
        ws.point = tr.depth[i] * ws.ray;
        ws.moved = t.apply(ws.point);
        const Vec3 q = k * ws.moved;
        ws.valid = decide(q.z() > kMinProjectedDepth ? 1 : 0) != 0;
        if (!ws.valid) continue;
        ws.u = unnormalize_coord(normalize_coord(q.x() / q.z(), w), w);
        ws.v = unnormalize_coord(normalize_coord(q.y() / q.z(), h), h);
        BilinearTaps nat = bilinear_taps(ws.u, ws.v, w, h, scene_.padding);
        BilinearTaps& tp = ws.taps;
        tp.clamp_x = decide(nat.clamp_x);
        tp.clamp_y = decide(nat.clamp_y);
        tp.x0 = decide(nat.x0);
        tp.y0 = decide(nat.y0);
        // A replayed cell that differs from the natural one extends the frozen
        // bilinear piece linearly; far-out cells only read padding.
        auto frac = [](double pos, int cell) { return std::abs(pos - cell - 0.5) <= 1.0 ? pos - cell : 0.0; };
        const double uu = tp.clamp_x < 0 ? 0.0 : tp.clamp_x > 0 ? w - 1.0 : ws.u;
        const double vv = tp.clamp_y < 0 ? 0.0 : tp.clamp_y > 0 ? h - 1.0 : ws.v;
        tp.fx = (tp.x0 == nat.x0 && tp.clamp_x == nat.clamp_x) ? nat.fx : frac(uu, tp.x0);
        tp.fy = (tp.y0 == nat.y0 && tp.clamp_y == nat.clamp_y) ? nat.fy : frac(vv, tp.y0);
        for (int c = 0; c < ch; ++c) st.warped.at(u, v, c) = bilinear_at(source, tp, c, scene_.padding);
      }

    st.pe = Grid(w, h, 1);
    st.dssim_state.resize(n);
    st.l1_sign.resize(n * ch);
    std::vector<double> ssim_sum(n, 0.0);
    for (int c = 0; c < ch; ++c) {
      st.moments.push_back(ssim_moments(target, st.warped, c));
      for (std::size_t i = 0; i < n; ++i)
        ssim_sum[i] += ssim_terms(st.moments.back(), i, cfg.ssim_c1, cfg.ssim_c2).value();
    }
    for (std::size_t i = 0; i < n; ++i) {
      const double dssim = 1.0 - ssim_sum[i] / ch;
      const int state = decide(dssim < 0 ? 1 : dssim > 2 ? 2 : 0);
      st.dssim_state[i] = state;
      const double dc = state == 1 ? 0.0 : state == 2 ? 2.0 : dssim;
      double l1 = 0;
      for (int c = 0; c < ch; ++c) {
        const double diff = st.warped[i * ch + c] - target[i * ch + c];
        const int sg = decide(l1_sign_of(diff));
        st.l1_sign[i * ch + c] = sg;
        l1 += sg != 0 ? sg * diff : std::abs(diff);
      }
      st.pe[i] = cfg.alpha / 2 * dc + (1 - cfg.alpha) * (l1 / ch);
    }
  }

  // Minimum reprojection over candidates, mean over the interior.
  const int m = (scene_.interior_margin + (1 << s) - 1) >> s;
  tr.winner.resize(n);
  tr.interior.assign(n, 0);
  last_min_map_ = Grid(w, h, 1);
  double lp = 0;
  tr.interior_count = 0;
  for (int v = 0; v < h; ++v)
    for (int u = 0; u < w; ++u) {
      const std::size_t i = static_cast<std::size_t>(v) * w + u;
      int best = 0;
      for (std::size_t j = 1; j < tr.src.size(); ++j)
        if (tr.src[j].pe[i] < tr.src[best].pe[i]) best = static_cast<int>(j);
      best = decide(best);
      tr.winner[i] = best;
      last_min_map_[i] = tr.src[best].pe[i];
      if (u >= m && u < w - m && v >= m && v < h - m) {
        tr.interior[i] = 1;
        ++tr.interior_count;
        lp += last_min_map_[i];
      }
    }
  if (tr.interior_count == 0) throw PreconditionError("interior margin leaves no pixels at scale " + std::to_string(s));
  tr_lp_ = lp / static_cast<double>(tr.interior_count);

  // Edge-aware smoothness on mean-normalized disparity.
  const double mean = disp_sm.mean();
  if (!(mean > 0)) throw PreconditionError("smoothness needs a positive mean disparity");
  tr.disp_mean = mean;
  auto img_grad = [&](int x0, int y0, int x1, int y1) {
    double g = 0;
    for (int c = 0; c < ch; ++c) g += std::abs(target.at(x1, y1, c) - target.at(x0, y0, c));
    return g / ch;
  };
  double sx = 0, sy = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x + 1 < w; ++x) {
      const double diff = disp_sm.at(x + 1, y) / mean - disp_sm.at(x, y) / mean;
      const int sg = decide(sign_of(diff));
      const double wgt = std::exp(-img_grad(x, y, x + 1, y));
      tr.sx_sign.push_back(sg);
      tr.sx_weight.push_back(wgt);
      sx += sg * diff * wgt;
    }
  for (int y = 0; y + 1 < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double diff = disp_sm.at(x, y + 1) / mean - disp_sm.at(x, y) / mean;
      const int sg = decide(sign_of(diff));
      const double wgt = std::exp(-img_grad(x, y, x, y + 1));
      tr.sy_sign.push_back(sg);
      tr.sy_weight.push_back(wgt);
      sy += sg * diff * wgt;
    }
  const double nx = static_cast<double>(w - 1) * h, ny = static_cast<double>(h - 1) * w;
  tr_ls_ = sx / nx + sy / ny;
}

inline ParamGroups Pipeline::backward() const {
  const auto& cfg = scene_.loss;
  ParamGroups grad = ParamGroups::zeros_like(params_);
  const int full_w = scene_.target.width(), full_h = scene_.target.height();
  Grid g_rep_full(full_w, full_h, 1), g_sm_full(full_w, full_h, 1);
  double g_fx = 0, g_fy = 0, g_cx = 0, g_cy = 0;
  std::vector<Mat3> g_rot(transforms_.size(), Mat3::Zero());
  std::vector<Vec3> g_trans(transforms_.size(), Vec3::Zero());
  const double per_scale = 1.0 / static_cast<double>(traces_.size());

  for (const ScaleTrace& tr : traces_) {
    const Grid& target = target_pyr_[tr.scale];
    const int w = tr.width, h = tr.height, ch = target.channels();
    const std::size_t n = static_cast<std::size_t>(w) * h;
    Grid g_rep(w, h, 1), g_sm(w, h, 1);
    double g_fxp = 0, g_fyp = 0, g_cxp = 0, g_cyp = 0;
    const double g_min = cfg.mu * per_scale / static_cast<double>(tr.interior_count);

    for (std::size_t j = 0; j < tr.src.size(); ++j) {
      const SourceTrace& st = tr.src[j];
      const Grid& source = source_pyr_[j][tr.scale];
      std::vector<double> g_pe(n, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        if (tr.interior[i] && tr.winner[i] == static_cast<int>(j)) g_pe[i] = g_min;

      // pe -> warped image
      Grid g_warp(w, h, ch);
      for (int c = 0; c < ch; ++c) {
        const SsimMoments& mo = st.moments[c];
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * w + x;
            if (g_pe[i] == 0.0 || st.dssim_state[i] != 0) continue;
            const double g_s = -cfg.alpha / 2 * g_pe[i] / ch;
            const SsimTerms t = ssim_terms(mo, i, cfg.ssim_c1, cfg.ssim_c2);
            const double sv = t.value(), dd = t.d1 * t.d2;
            const double ma = mo.mu_a[i], mb = mo.mu_b[i];
            const double d_mu = (2 * ma * t.n2 - 2 * ma * t.n1) / dd - sv * (2 * mb / t.d1 - 2 * mb / t.d2);
            const double d_mab = 2 * t.n1 / dd;
            const double d_mbb = -sv / t.d2;
            for (int dy = -1; dy <= 1; ++dy)
              for (int dx = -1; dx <= 1; ++dx) {
                const int xx = reflect(x + dx, w), yy = reflect(y + dy, h);
                const double a = target.at(xx, yy, c), b = st.warped.at(xx, yy, c);
                g_warp.at(xx, yy, c) += g_s * (d_mu + 2 * b * d_mbb + a * d_mab) / 9.0;
              }
          }
      }
      for (std::size_t i = 0; i < n; ++i)
        for (int c = 0; c < ch; ++c) g_warp[i * ch + c] += g_pe[i] * (1 - cfg.alpha) / ch * st.l1_sign[i * ch + c];

      // warped image -> sampling position -> geometry
      const Mat3& rot = transforms_[j].rotation;
      for (int v = 0; v < h; ++v)
        for (int u = 0; u < w; ++u) {
          const std::size_t i = static_cast<std::size_t>(v) * w + u;
          const WarpSample& ws = st.samples[i];
          if (!ws.valid) continue;
          const BilinearTaps& tp = ws.taps;
          double g_u = 0, g_v = 0;
          for (int c = 0; c < ch; ++c) {
            const double gw = g_warp[i * ch + c];
            if (gw == 0.0) continue;
            const double v00 = tap(source, tp.x0, tp.y0, c, scene_.padding);
            const double v10 = tap(source, tp.x0 + 1, tp.y0, c, scene_.padding);
            const double v01 = tap(source, tp.x0, tp.y0 + 1, c, scene_.padding);
            const double v11 = tap(source, tp.x0 + 1, tp.y0 + 1, c, scene_.padding);
            if (tp.clamp_x == 0) g_u += gw * ((1 - tp.fy) * (v10 - v00) + tp.fy * (v11 - v01));
            if (tp.clamp_y == 0) g_v += gw * ((1 - tp.fx) * (v01 - v00) + tp.fx * (v11 - v10));
          }
          if (g_u == 0.0 && g_v == 0.0) continue;
          // Round trip through normalized coordinates has unit derivative.
          g_u *= (w - 1) / 2.0 * (2.0 / (w - 1));
          g_v *= (h - 1) / 2.0 * (2.0 / (h - 1));
          const Vec3& q = ws.moved;
          const double pu = (tr.fxp * q.x() + tr.cxp * q.z()) / q.z();
          const double pv = (tr.fyp * q.y() + tr.cyp * q.z()) / q.z();
          const Vec3 g_q(g_u * tr.fxp / q.z(), g_v * tr.fyp / q.z(),
                         (g_u * (tr.cxp - pu) + g_v * (tr.cyp - pv)) / q.z());
          g_fxp += g_u * q.x() / q.z();
          g_cxp += g_u;
          g_fyp += g_v * q.y() / q.z();
          g_cyp += g_v;
          g_rot[j] += g_q * ws.point.transpose();
          g_trans[j] += g_q;
          const Vec3 g_p = rot.transpose() * g_q;
          const double z = tr.depth[i];
          const double g_z = g_p.dot(ws.ray);
          const double g_rx = g_p.x() * z, g_ry = g_p.y() * z;
          g_fxp += -g_rx * ws.ray.x() / tr.fxp;
          g_cxp += -g_rx / tr.fxp;
          g_fyp += -g_ry * ws.ray.y() / tr.fyp;
          g_cyp += -g_ry / tr.fyp;
          g_rep[i] += -g_z * scene_.depth_range.inv_span() * z * z;
        }
    }

    // smoothness -> disparity
    const double g_ls = cfg.lambda * per_scale;
    const double nx = static_cast<double>(w - 1) * h, ny = static_cast<double>(h - 1) * w;
    const double mean = tr.disp_mean;
    double g_mean = 0;
    std::size_t e = 0;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x + 1 < w; ++x, ++e) {
        const double c = g_ls / nx * tr.sx_sign[e] * tr.sx_weight[e];
        g_sm.at(x + 1, y) += c / mean;
        g_sm.at(x, y) -= c / mean;
        g_mean -= c * (tr.disp_sm.at(x + 1, y) - tr.disp_sm.at(x, y)) / (mean * mean);
      }
    e = 0;
    for (int y = 0; y + 1 < h; ++y)
      for (int x = 0; x < w; ++x, ++e) {
        const double c = g_ls / ny * tr.sy_sign[e] * tr.sy_weight[e];
        g_sm.at(x, y + 1) += c / mean;
        g_sm.at(x, y) -= c / mean;
        g_mean -= c * (tr.disp_sm.at(x, y + 1) - tr.disp_sm.at(x, y)) / (mean * mean);
      }
    for (double& g : g_sm.data()) g += g_mean / static_cast<double>(n);

    for (int k = 0; k < tr.scale; ++k) {
      g_rep = downsample2x_adjoint(g_rep);
      g_sm = downsample2x_adjoint(g_sm);
    }
    for (std::size_t i = 0; i < g_rep_full.size(); ++i) {
      g_rep_full[i] += g_rep[i];
      g_sm_full[i] += g_sm[i];
    }
    const double ws = full_w >> tr.scale, hs = full_h >> tr.scale;
    g_fx += g_fxp * ws;
    g_cx += g_cxp * ws;
    g_fy += g_fyp * hs;
    g_cy += g_cyp * hs;
  }

  // adjusted disparity -> disparity -> logits
  Grid g_disp(full_w, full_h, 1);
  const bool adjusted = !gather_.empty();
  for (std::size_t i = 0; i < g_disp.size(); ++i) {
    g_disp[adjusted ? gather_[i] : i] += g_rep_full[i];
    if (adjusted && scene_.adjust.apply_to_smoothness) g_disp[gather_[i]] += g_sm_full[i];
    else g_disp[i] += g_sm_full[i];
  }
  for (std::size_t i = 0; i < g_disp.size(); ++i) {
    const double sg = disp_[i];
    grad.inv_depth[i] = g_disp[i] * sg * (1 - sg);
  }

  for (std::size_t j = 0; j < transforms_.size(); ++j) {
    const Pose6& p = params_.pose[j];
    const auto d_rot = rotation_jacobian(Vec3(p[0], p[1], p[2]));
    for (int k = 0; k < 3; ++k) grad.pose[j][k] = g_rot[j].cwiseProduct(d_rot[k]).sum();
    for (int k = 0; k < 3; ++k) grad.pose[j][3 + k] = g_trans[j][k];
  }
  grad.intrinsics_raw = {g_fx * sigmoid(params_.intrinsics_raw[0]), g_fy * sigmoid(params_.intrinsics_raw[1]),
                         g_cx, g_cy};
  return grad;
}

}  // namespace detail

/// Loss value; decisions are recorded into (or replayed from) `log` when given.
inline LossBreakdown evaluate_loss(const WarpScene& scene, const ParamGroups& params, BranchLog* log = nullptr) {
  detail::Pipeline p(scene, params);
  return p.forward(log);
}

struct LossAndGradient {
  double loss = 0;
  LossBreakdown breakdown;
  ParamGroups grad;
};

/// Deterministic: identical inputs give bitwise identical outputs.
inline LossAndGradient loss_and_gradients(const WarpScene& scene, const ParamGroups& params) {
  detail::Pipeline p(scene, params);
  LossAndGradient out;
  out.breakdown = p.forward(nullptr);
  out.loss = out.breakdown.total;
  out.grad = p.backward();
  return out;
}

/// Central difference of a scalar function of one variable.
template <class F>
double central_difference(F&& f, double x, double h) {
  if (!(h > 0)) throw PreconditionError("finite-difference step must be positive");
  return (f(x + h) - f(x - h)) / (2 * h);
}

struct FiniteDifference {
  double value = 0;   // (L(x+h) - L(x-h)) / 2h
  bool kink = false;  // some decision changes within +-window*h
};

/// Central difference of the total loss along one flat parameter coordinate.
inline FiniteDifference finite_diff(const WarpScene& scene, const ParamGroups& params, std::size_t coord, double h,
                                    double window = 10.0) {
  if (!(h > 0)) throw PreconditionError("finite-difference step must be positive");
  if (coord >= params.size()) throw PreconditionError("parameter coordinate out of range");
  ParamGroups p = params;
  const double x = params[coord];
  auto at = [&](double xv, BranchLog* log) {
    p[coord] = xv;
    return evaluate_loss(scene, p, log).total;
  };
  FiniteDifference fd;
  fd.value = (at(x + h, nullptr) - at(x - h, nullptr)) / (2 * h);
  BranchLog base, lo, hi;
  at(x, &base);
  at(x - window * h, &lo);
  at(x + window * h, &hi);
  fd.kink = !base.same_path(lo) || !base.same_path(hi);
  return fd;
}

/// Central difference with every discrete decision frozen at the base point,
/// i.e. the derivative of the smooth piece the analytic gradient describes.
inline double frozen_finite_diff(const WarpScene& scene, const ParamGroups& params, const BranchLog& base,
                                 std::size_t coord, double h) {
  ParamGroups p = params;
  const double x = params[coord];
  auto at = [&](double xv) {
    p[coord] = xv;
    BranchLog replay = BranchLog::replaying(base);
    return evaluate_loss(scene, p, &replay).total;
  };
  return (at(x + h) - at(x - h)) / (2 * h);
}

struct GroupReport {
  std::string name;
  double max_rel_err = 0;
  double mean_rel_err = 0;
  int checked = 0;   // compared against the plain central difference
  int flagged = 0;   // near a kink; compared against the frozen-branch difference
  double flagged_max_rel_err = 0;
};

struct GradReport {
  std::vector<GroupReport> groups;
  double h = 0;
  double tol = 0;
  bool pass = false;

  int checked() const {
    int n = 0;
    for (const auto& g : groups) n += g.checked;
    return n;
  }
  double max_rel_err() const {
    double m = 0;
    for (const auto& g : groups) m = std::max({m, g.max_rel_err, g.flagged_max_rel_err});
    return m;
  }
};

struct GradcheckOptions {
  int samples = 200;  // per parameter group, capped at the group size
  double h = 1e-4;
  double tol = 1e-4;
  std::uint64_t seed = 0;
  double kink_window = 10.0;
};

using GradientFn = std::function<ParamGroups(const WarpScene&, const ParamGroups&)>;

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

/// Compares analytic gradients with central differences on a deterministic
/// sample of coordinates from every group. Coordinates within kink_window*h of
/// a kink are excluded from the plain comparison and checked against the
/// frozen-branch difference instead.
inline GradReport gradcheck(const WarpScene& scene, const ParamGroups& params, const GradcheckOptions& opt,
                            const GradientFn& analytic = {}) {
  if (opt.samples < 1) throw PreconditionError("gradcheck needs at least one sample");
  const ParamGroups grad = analytic ? analytic(scene, params) : loss_and_gradients(scene, params).grad;
  if (grad.size() != params.size()) throw PreconditionError("analytic gradient has the wrong shape");
  BranchLog base;
  evaluate_loss(scene, params, &base);

  std::mt19937_64 rng(opt.seed);
  GradReport report;
  report.h = opt.h;
  report.tol = opt.tol;
  report.pass = true;
  for (ParamGroup g : {ParamGroup::InvDepth, ParamGroup::Pose, ParamGroup::Intrinsics}) {
    const auto [lo, hi] = params.range(g);
    std::vector<std::size_t> coords(hi - lo);
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = lo + i;
    const std::size_t take = std::min(coords.size(), static_cast<std::size_t>(opt.samples));
    for (std::size_t i = 0; i < take; ++i) {  // partial Fisher-Yates, portable across standard libraries
      const std::size_t j = i + static_cast<std::size_t>(rng() % (coords.size() - i));
      std::swap(coords[i], coords[j]);
    }
    GroupReport gr;
    gr.name = group_name(g);
    double sum = 0;
    for (std::size_t i = 0; i < take; ++i) {
      const std::size_t c = coords[i];
      const FiniteDifference fd = finite_diff(scene, params, c, opt.h, opt.kink_window);
      if (fd.kink) {
        ++gr.flagged;
        const double frozen = frozen_finite_diff(scene, params, base, c, opt.h);
        gr.flagged_max_rel_err = std::max(gr.flagged_max_rel_err, relative_error(grad[c], frozen));
        continue;
      }
      const double e = relative_error(grad[c], fd.value);
      ++gr.checked;
      sum += e;
      gr.max_rel_err = std::max(gr.max_rel_err, e);
    }
    gr.mean_rel_err = gr.checked ? sum / gr.checked : 0.0;
    if (gr.max_rel_err >= opt.tol || gr.flagged_max_rel_err >= opt.tol) report.pass = false;
    report.groups.push_back(gr);
  }
  if (report.checked() == 0) report.pass = false;
  return report;
}

struct CheckProblem {
  WarpScene scene;
  ParamGroups params;
};

namespace detail {

inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }
inline double uniform(std::mt19937_64& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

/// Smooth random RGB texture in roughly [0.1, 0.9].
inline Grid smooth_texture(int w, int h, int channels, std::mt19937_64& rng, double freq) {
  Grid g(w, h, channels);
  for (int c = 0; c < channels; ++c) {
    std::array<double, 4> fx{}, fy{}, ph{}, amp{};
    for (int k = 0; k < 4; ++k) {
      fx[k] = uniform(rng, -freq, freq);
      fy[k] = uniform(rng, -freq, freq);
      ph[k] = uniform(rng, 0, 2 * M_PI);
      amp[k] = uniform(rng, 0.05, 0.1);
    }
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double v = 0.5;
        for (int k = 0; k < 4; ++k) v += amp[k] * std::sin(2 * M_PI * (fx[k] * x + fy[k] * y) + ph[k]);
        g.at(x, y, c) = v;
      }
  }
  return g;
}

}  // namespace detail

/// Random but smooth gradient-check problem: two source frames, random
/// disparity, small random poses and intrinsics. Loss scales use every level
/// that stays at least 2x2 (at most 3).
inline CheckProblem make_check_problem(int width, int height, std::uint64_t seed, bool with_instances = false) {
  detail::require(width >= 2 && height >= 2, "check problem needs at least 2x2 pixels");
  std::mt19937_64 rng(seed);
  CheckProblem cp;
  WarpScene& sc = cp.scene;
  sc.target = detail::smooth_texture(width, height, 3, rng, 0.15);
  for (int j = 0; j < 2; ++j) sc.sources.push_back(detail::smooth_texture(width, height, 3, rng, 0.15));
  sc.loss.scales.clear();
  for (int s = 0; s < 3; ++s) {
    const int d = 1 << s;
    if (width % d || height % d || width / d < 2 || height / d < 2) break;
    sc.loss.scales.push_back(s);
  }
  sc.depth_range = {0.5, 20.0};
  sc.padding = Padding::Border;

  ParamGroups& p = cp.params;
  p.inv_depth = Grid(width, height, 1);
  const double a = detail::uniform(rng, 0.1, 0.3), b = detail::uniform(rng, 0.1, 0.3);
  const double ph = detail::uniform(rng, 0, 2 * M_PI);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      p.inv_depth.at(x, y) = -1.0 + std::sin(a * x + b * y + ph) + 0.3 * detail::uniform(rng, -1, 1);
  for (int j = 0; j < 2; ++j) {
    Pose6 q;
    for (int k = 0; k < 3; ++k) q[k] = detail::uniform(rng, -0.03, 0.03);
    for (int k = 3; k < 6; ++k) q[k] = detail::uniform(rng, -0.1, 0.1);
    p.pose.push_back(q);
  }
  const Intrinsics in{detail::uniform(rng, 0.5, 0.9), detail::uniform(rng, 0.8, 1.9), detail::uniform(rng, 0.4, 0.6),
                      detail::uniform(rng, 0.4, 0.6)};
  p.intrinsics_raw = in.to_raw();

  if (with_instances) {
    // Two overlapping rectangles of qualifying classes.
    for (int k = 0; k < 2; ++k) {
      InstanceMask m{Grid(width, height, 1), 0.9, k == 0 ? 1 : 3};
      const int x0 = k == 0 ? width / 8 : width / 3, x1 = k == 0 ? width / 2 : 3 * width / 4;
      const int y0 = k == 0 ? height / 4 : height / 3, y1 = k == 0 ? 3 * height / 4 : 7 * height / 8;
      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) m.mask.at(x, y) = 1.0;
      sc.instances.push_back(std::move(m));
    }
  }
  return cp;
}

}  // namespace mdepth
