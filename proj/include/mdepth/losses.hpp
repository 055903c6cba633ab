#pragma once

// Photometric and smoothness losses for self-supervised depth.
//
//   pe(a, b) = alpha/2 * clamp(1 - SSIM(a, b), 0, 2) + (1 - alpha) * mean_c |a - b|
//   L_p      = mean over pixels of min_i pe(target, warped_i)
//   L_s      = mean |dx d*| exp(-|dx I|) + mean |dy d*| exp(-|dy I|),  d* = d / mean(d)
//   L        = mean over scales of (mu * L_p + lambda * L_s)

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mdepth/error.hpp"
#include "mdepth/grid.hpp"

namespace mdepth {

struct LossConfig {
  double alpha = 0.85;
  double mu = 1.0;
  double lambda = 1e-3;
  double ssim_c1 = 0.01 * 0.01;
  double ssim_c2 = 0.03 * 0.03;
  std::vector<int> scales{0, 1, 2, 3};

  void validate() const {
    if (!(alpha >= 0 && alpha <= 1)) throw PreconditionError("alpha must lie in [0, 1]");
    if (!(mu >= 0 && lambda >= 0)) throw PreconditionError("mu and lambda must be non-negative");
    if (!(ssim_c1 > 0 && ssim_c2 > 0)) throw PreconditionError("SSIM constants must be positive");
    if (scales.empty()) throw PreconditionError("at least one loss scale is required");
    for (int s : scales)
      if (s < 0) throw PreconditionError("loss scales must be non-negative");
  }
  int num_levels() const { return *std::max_element(scales.begin(), scales.end()) + 1; }
};

struct ScaleLoss {
  double photometric = 0;  // L_p
  double smoothness = 0;   // L_s
};

struct LossBreakdown {
  double total = 0;
  std::vector<ScaleLoss> per_scale;
  Grid min_error_map;  // per-pixel min pe at the finest configured scale
};

namespace detail {

/// Reflect padding without edge repetition: -1 -> 1, n -> n - 2.
inline int reflect(int i, int n) {
  if (n == 1) return 0;
  if (i < 0) return -i;
  if (i >= n) return 2 * (n - 1) - i;
  return i;
}

/// Local 3x3 moments for one channel pair at every pixel.
struct SsimMoments {
  std::vector<double> mu_a, mu_b, m_aa, m_bb, m_ab;
};

inline SsimMoments ssim_moments(const Grid& a, const Grid& b, int c) {
  const int w = a.width(), h = a.height();
  const std::size_t n = a.pixel_count();
  SsimMoments m{std::vector<double>(n), std::vector<double>(n), std::vector<double>(n),
                std::vector<double>(n), std::vector<double>(n)};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int xx = reflect(x + dx, w), yy = reflect(y + dy, h);
          const double va = a.at(xx, yy, c), vb = b.at(xx, yy, c);
          sa += va;
          sb += vb;
          saa += va * va;
          sbb += vb * vb;
          sab += va * vb;
        }
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      m.mu_a[i] = sa / 9;
      m.mu_b[i] = sb / 9;
      m.m_aa[i] = saa / 9;
      m.m_bb[i] = sbb / 9;
      m.m_ab[i] = sab / 9;
    }
  return m;
}

struct SsimTerms {
  double n1, n2, d1, d2;
  double value() const { return (n1 * n2) / (d1 * d2); }
};

inline SsimTerms ssim_terms(const SsimMoments& m, std::size_t i, double c1, double c2) {
  const double ma = m.mu_a[i], mb = m.mu_b[i];
  const double var_a = m.m_aa[i] - ma * ma;
  const double var_b = m.m_bb[i] - mb * mb;
  const double cov = m.m_ab[i] - ma * mb;
  return {2 * ma * mb + c1, 2 * cov + c2, ma * ma + mb * mb + c1, var_a + var_b + c2};
}

inline void require_same(const Grid& a, const Grid& b, const char* what) {
  if (!a.same_shape(b))
    throw PreconditionError(std::string(what) + ": shape mismatch " + a.shape_string() + " vs " +
                            b.shape_string());
}

}  // namespace detail

/// Per-pixel SSIM with 3x3 box statistics (reflect padding), averaged over channels.
inline Grid ssim(const Grid& a, const Grid& b, double c1, double c2) {
  detail::require_same(a, b, "ssim");
  Grid out(a.width(), a.height(), 1);
  for (int c = 0; c < a.channels(); ++c) {
    const auto m = detail::ssim_moments(a, b, c);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += detail::ssim_terms(m, i, c1, c2).value();
  }
  for (double& v : out.data()) v /= a.channels();
  return out;
}

inline Grid photometric_error(const Grid& a, const Grid& b, const LossConfig& cfg) {
  detail::require_same(a, b, "photometric_error");
  Grid s = ssim(a, b, cfg.ssim_c1, cfg.ssim_c2);
  const int ch = a.channels();
  for (std::size_t i = 0; i < s.size(); ++i) {
    double l1 = 0;
    for (int c = 0; c < ch; ++c) l1 += std::abs(a[i * ch + c] - b[i * ch + c]);
    l1 /= ch;
    const double dssim = std::clamp(1.0 - s[i], 0.0, 2.0);
    s[i] = cfg.alpha / 2 * dssim + (1 - cfg.alpha) * l1;
  }
  return s;
}

struct MinReduction {
  double value = 0;       // spatial mean of the min map
  Grid map;               // per-pixel minimum
  std::vector<int> arg;   // winning candidate, ties to the lowest index
};

/// Per-pixel minimum over same-shaped maps, then the spatial mean.
inline MinReduction min_over_maps(std::span<const Grid> maps) {
  if (maps.empty()) throw PreconditionError("minimum over an empty candidate list");
  MinReduction r{0, maps[0], std::vector<int>(maps[0].size(), 0)};
  for (std::size_t k = 1; k < maps.size(); ++k) {
    detail::require_same(maps[0], maps[k], "min_over_maps");
    for (std::size_t i = 0; i < r.map.size(); ++i)
      if (maps[k][i] < r.map[i]) {
        r.map[i] = maps[k][i];
        r.arg[i] = static_cast<int>(k);
      }
  }
  r.value = r.map.mean();
  return r;
}

inline std::pair<double, Grid> min_reprojection_loss(const Grid& target, std::span<const Grid> warped,
                                                     const LossConfig& cfg) {
  if (warped.empty()) throw PreconditionError("min_reprojection_loss needs at least one warped image");
  std::vector<Grid> pe;
  pe.reserve(warped.size());
  for (const Grid& w : warped) pe.push_back(photometric_error(target, w, cfg));
  auto r = min_over_maps(pe);
  return {r.value, std::move(r.map)};
}

/// Edge-aware smoothness on mean-normalized disparity.
inline double smoothness_loss(const Grid& disp, const Grid& image) {
  detail::require(disp.channels() == 1, "smoothness_loss needs a 1-channel disparity");
  detail::require(disp.same_size(image), "smoothness_loss: disparity and image sizes differ");
  const double mean = disp.mean();
  if (!(mean > 0)) throw PreconditionError("smoothness_loss needs a positive mean disparity");
  const int w = disp.width(), h = disp.height(), ch = image.channels();
  auto img_grad = [&](int x0, int y0, int x1, int y1) {
    double g = 0;
    for (int c = 0; c < ch; ++c) g += std::abs(image.at(x1, y1, c) - image.at(x0, y0, c));
    return g / ch;
  };
  double sx = 0, sy = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x + 1 < w; ++x)
      sx += std::abs(disp.at(x + 1, y) / mean - disp.at(x, y) / mean) * std::exp(-img_grad(x, y, x + 1, y));
  for (int y = 0; y + 1 < h; ++y)
    for (int x = 0; x < w; ++x)
      sy += std::abs(disp.at(x, y + 1) / mean - disp.at(x, y) / mean) * std::exp(-img_grad(x, y, x, y + 1));
  const double nx = static_cast<double>(w - 1) * h, ny = static_cast<double>(h - 1) * w;
  return (nx > 0 ? sx / nx : 0.0) + (ny > 0 ? sy / ny : 0.0);
}

/// Mean over scales of mu * L_p + lambda * L_s.
inline double combine_scales(std::span<const ScaleLoss> per_scale, const LossConfig& cfg) {
  if (per_scale.empty()) throw PreconditionError("no scales to combine");
  double total = 0;
  for (const ScaleLoss& s : per_scale) total += cfg.mu * s.photometric + cfg.lambda * s.smoothness;
  return total / static_cast<double>(per_scale.size());
}

/// `warped_per_scale[k]` and `disp_per_scale[k]` belong to pyramid level cfg.scales[k].
inline LossBreakdown total_loss(const Pyramid& target_pyr, const std::vector<std::vector<Grid>>& warped_per_scale,
                                const std::vector<Grid>& disp_per_scale, const LossConfig& cfg) {
  cfg.validate();
  const std::size_t n = cfg.scales.size();
  if (warped_per_scale.size() != n || disp_per_scale.size() != n)
    throw PreconditionError("total_loss: expected inputs for " + std::to_string(n) + " scales");
  LossBreakdown out;
  int finest = -1;
  for (std::size_t k = 0; k < n; ++k) {
    const int s = cfg.scales[k];
    if (static_cast<std::size_t>(s) >= target_pyr.size())
      throw PreconditionError("total_loss: pyramid has no level " + std::to_string(s));
    const Grid& target = target_pyr[s];
    if (!disp_per_scale[k].same_size(target))
      throw PreconditionError("total_loss: disparity size mismatch at scale " + std::to_string(s));
    for (const Grid& w : warped_per_scale[k])
      if (!w.same_shape(target))
        throw PreconditionError("total_loss: warped image shape mismatch at scale " + std::to_string(s));
    auto [lp, map] = min_reprojection_loss(target, warped_per_scale[k], cfg);
    out.per_scale.push_back({lp, smoothness_loss(disp_per_scale[k], target)});
    if (finest < 0 || s < finest) {
      finest = s;
      out.min_error_map = std::move(map);
    }
  }
  out.total = combine_scales(out.per_scale, cfg);
  return out;
}

}  // namespace mdepth
