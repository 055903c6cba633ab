#pragma once

// Seedable weather augmentations: snow, sun flare, fog and rain.
//
// Random stream: std::mt19937_64 seeded with WeatherConfig::seed; a uniform
// variate is (next() >> 11) * 2^-53. For each effect in the order snow, flare,
// fog, rain one gate variate is drawn; parameters are drawn from the same
// stream only when the gate opens.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "json.hpp"
#include "mdepth/error.hpp"
#include "mdepth/grid.hpp"

namespace mdepth {

enum class Effect { Snow, Flare, Fog, Rain };

inline const char* effect_name(Effect e) {
  switch (e) {
    case Effect::Snow: return "snow";
    case Effect::Flare: return "flare";
    case Effect::Fog: return "fog";
    case Effect::Rain: return "rain";
  }
  return "?";
}

struct FogParams {
  double beta = 0;  // white blend weight
};
struct RainParams {
  double length = 0;     // pixels
  double slant_deg = 0;  // from vertical, positive leans right
  std::vector<std::pair<double, double>> starts;  // upper end of each streak, pixels
};
struct SnowParams {
  double threshold = 0;  // luma threshold
  double factor = 1;     // brightening factor
};
struct FlareParams {
  double cx = 0, cy = 0;  // pixels
  double radius = 1;      // pixels
  double intensity = 0;
};

using EffectParams = std::variant<SnowParams, FlareParams, FogParams, RainParams>;

inline Effect effect_of(const EffectParams& p) { return static_cast<Effect>(p.index()); }

struct Range {
  double lo = 0, hi = 0;
};

struct WeatherConfig {
  double p_each = 0.3;
  std::uint64_t seed = 0;
  Range fog_beta{0.1, 0.5};
  Range rain_count{10, 40};       // streaks, rounded down
  Range rain_length{0.05, 0.15};  // fraction of image height
  Range rain_slant{-20, 20};      // degrees
  Range snow_threshold{0.4, 0.7};
  Range snow_factor{1.2, 2.0};
  Range flare_radius{0.1, 0.4};   // fraction of max(width, height)
  Range flare_intensity{0.3, 0.8};

  void validate() const {
    if (!(p_each >= 0 && p_each <= 1)) throw PreconditionError("p_each must lie in [0, 1]");
    auto check = [](const Range& r, double lo, double hi, const char* what) {
      if (!(r.lo <= r.hi && r.lo >= lo && r.hi <= hi))
        throw PreconditionError(std::string(what) + " range must satisfy " + std::to_string(lo) + " <= lo <= hi <= " +
                                std::to_string(hi));
    };
    check(fog_beta, 0, 1, "fog_beta");
    check(rain_count, 0, 10000, "rain_count");
    check(rain_length, 0, 1, "rain_length");
    check(rain_slant, -80, 80, "rain_slant");
    check(snow_threshold, 0, 1, "snow_threshold");
    check(snow_factor, 1, 10, "snow_factor");
    check(flare_radius, 1e-3, 2, "flare_radius");
    check(flare_intensity, 0, 1, "flare_intensity");
  }
};

namespace detail {

inline void require_rgb(const Grid& img) {
  if (img.channels() != 3) throw PreconditionError("weather effects need a 3-channel image, got " + img.shape_string());
}

inline double luma(const Grid& img, int x, int y) {
  return 0.299 * img.at(x, y, 0) + 0.587 * img.at(x, y, 1) + 0.114 * img.at(x, y, 2);
}

inline void clamp01(Grid& img) {
  for (double& v : img.data()) v = std::clamp(v, 0.0, 1.0);
}

inline void blend_rain(Grid& img, int x, int y, double coverage) {
  if (x < 0 || y < 0 || x >= img.width() || y >= img.height() || coverage <= 0) return;
  const double a = 0.5 * std::min(coverage, 1.0);
  for (int c = 0; c < 3; ++c) img.at(x, y, c) = (1 - a) * img.at(x, y, c) + a * 0.8;
}

// Xiaolin Wu's anti-aliased line.
inline void wu_line(Grid& img, double x0, double y0, double x1, double y1) {
  const bool steep = std::abs(y1 - y0) > std::abs(x1 - x0);
  if (steep) {
    std::swap(x0, y0);
    std::swap(x1, y1);
  }
  if (x0 > x1) {
    std::swap(x0, x1);
    std::swap(y0, y1);
  }
  const double dx = x1 - x0, dy = y1 - y0;
  const double grad = dx == 0 ? 1.0 : dy / dx;
  auto plot = [&](int a, int b, double cov) { steep ? blend_rain(img, b, a, cov) : blend_rain(img, a, b, cov); };
  auto fpart = [](double v) { return v - std::floor(v); };

  double xend = std::round(x0);
  double yend = y0 + grad * (xend - x0);
  double xgap = 1 - fpart(x0 + 0.5);
  const int xp1 = static_cast<int>(xend), yp1 = static_cast<int>(std::floor(yend));
  plot(xp1, yp1, (1 - fpart(yend)) * xgap);
  plot(xp1, yp1 + 1, fpart(yend) * xgap);
  double inter = yend + grad;

  xend = std::round(x1);
  yend = y1 + grad * (xend - x1);
  xgap = fpart(x1 + 0.5);
  const int xp2 = static_cast<int>(xend), yp2 = static_cast<int>(std::floor(yend));
  plot(xp2, yp2, (1 - fpart(yend)) * xgap);
  plot(xp2, yp2 + 1, fpart(yend) * xgap);

  for (int x = xp1 + 1; x < xp2; ++x) {
    const int y = static_cast<int>(std::floor(inter));
    plot(x, y, 1 - fpart(inter));
    plot(x, y + 1, fpart(inter));
    inter += grad;
  }
}

inline Grid apply(const Grid& in, const FogParams& p) {
  Grid out = in;
  for (double& v : out.data()) v = (1 - p.beta) * v + p.beta;
  return out;
}

inline Grid apply(const Grid& in, const RainParams& p) {
  Grid out = in;
  const double rad = p.slant_deg * M_PI / 180.0;
  for (const auto& [x, y] : p.starts)
    wu_line(out, x, y, x + p.length * std::sin(rad), y + p.length * std::cos(rad));
  for (double& v : out.data()) v *= 0.9;
  return out;
}

inline Grid apply(const Grid& in, const SnowParams& p) {
  Grid out = in;
  for (int y = 0; y < in.height(); ++y)
    for (int x = 0; x < in.width(); ++x)
      if (luma(in, x, y) > p.threshold)
        for (int c = 0; c < 3; ++c) out.at(x, y, c) = in.at(x, y, c) * p.factor;
  return out;
}

inline Grid apply(const Grid& in, const FlareParams& p) {
  Grid out = in;
  for (int y = 0; y < in.height(); ++y)
    for (int x = 0; x < in.width(); ++x) {
      const double add = std::max(0.0, 1.0 - std::hypot(x - p.cx, y - p.cy) / p.radius) * p.intensity;
      for (int c = 0; c < 3; ++c) out.at(x, y, c) += add;
    }
  return out;
}

}  // namespace detail

/// Applies one effect with explicit parameters; the result is clamped to [0, 1].
inline Grid apply_effect(const Grid& image, const EffectParams& params) {
  detail::require_rgb(image);
  Grid out = std::visit([&](const auto& p) { return detail::apply(image, p); }, params);
  detail::clamp01(out);
  return out;
}

/// Uniform variates in [0, 1) from a 64-bit Mersenne Twister.
class WeatherRng {
 public:
  explicit WeatherRng(std::uint64_t seed) : eng_(seed) {}
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }
  double uniform(const Range& r) { return r.lo + (r.hi - r.lo) * uniform(); }

 private:
  std::mt19937_64 eng_;
};

inline EffectParams draw_params(Effect e, WeatherRng& rng, const WeatherConfig& cfg, int width, int height) {
  switch (e) {
    case Effect::Snow: {
      SnowParams p;
      p.threshold = rng.uniform(cfg.snow_threshold);
      p.factor = rng.uniform(cfg.snow_factor);
      return p;
    }
    case Effect::Flare: {
      FlareParams p;
      p.cx = rng.uniform() * (width - 1);
      p.cy = rng.uniform() * (height - 1) / 2;
      p.radius = rng.uniform(cfg.flare_radius) * std::max(width, height);
      p.intensity = rng.uniform(cfg.flare_intensity);
      return p;
    }
    case Effect::Fog: return FogParams{rng.uniform(cfg.fog_beta)};
    case Effect::Rain: {
      RainParams p;
      const int n = static_cast<int>(std::floor(rng.uniform(cfg.rain_count)));
      p.length = rng.uniform(cfg.rain_length) * height;
      p.slant_deg = rng.uniform(cfg.rain_slant);
      for (int i = 0; i < n; ++i) {
        const double x = rng.uniform() * (width - 1);
        const double y = rng.uniform() * (height - 1);
        p.starts.emplace_back(x, y);
      }
      return p;
    }
  }
  throw PreconditionError("unknown effect");
}

struct AugmentResult {
  Grid image;
  std::vector<EffectParams> applied;
};

inline AugmentResult augment(const Grid& image, const WeatherConfig& cfg) {
  cfg.validate();
  detail::require_rgb(image);
  WeatherRng rng(cfg.seed);
  AugmentResult r{image, {}};
  for (Effect e : {Effect::Snow, Effect::Flare, Effect::Fog, Effect::Rain}) {
    if (!(rng.uniform() < cfg.p_each)) continue;
    r.applied.push_back(draw_params(e, rng, cfg, image.width(), image.height()));
    r.image = apply_effect(r.image, r.applied.back());
  }
  return r;
}

inline nlohmann::json to_json(const EffectParams& params) {
  nlohmann::json j;
  j["effect"] = effect_name(effect_of(params));
  std::visit(
      [&](const auto& p) {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, FogParams>) {
          j["beta"] = p.beta;
        } else if constexpr (std::is_same_v<T, RainParams>) {
          j["length"] = p.length;
          j["slant_deg"] = p.slant_deg;
          j["streaks"] = p.starts.size();
        } else if constexpr (std::is_same_v<T, SnowParams>) {
          j["threshold"] = p.threshold;
          j["factor"] = p.factor;
        } else {
          j["cx"] = p.cx;
          j["cy"] = p.cy;
          j["radius"] = p.radius;
          j["intensity"] = p.intensity;
        }
      },
      params);
  return j;
}

}  // namespace mdepth
