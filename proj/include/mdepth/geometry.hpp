#pragma once

// Pinhole camera, SE(3) poses and the inverse-warp used for view synthesis.
//
// Pixel (u, v) denotes the center of column u and row v. Flow grids use the
// align-corners normalization x_norm = 2u / (W - 1) - 1, so the corner pixels
// map exactly onto -1 and +1.

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/LU>

#include "mdepth/error.hpp"
#include "mdepth/grid.hpp"

namespace mdepth {

using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using Vec3 = Eigen::Vector3d;

/// Projections whose camera-frame depth falls at or below this are flagged invalid.
inline constexpr double kMinProjectedDepth = 1e-7;

inline double softplus(double x) {
  if (x > 0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

/// Derivative of softplus (the logistic function).
inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double inverse_softplus(double y) {
  detail::require(y > 0, "inverse_softplus needs a positive argument");
  return y > 30 ? y + std::log(-std::expm1(-y)) : std::log(std::expm1(y));
}

inline double logit(double p) {
  detail::require(p > 0 && p < 1, "logit needs an argument in (0, 1)");
  return std::log(p / (1.0 - p));
}

/// Normalized pinhole intrinsics: focal lengths relative to image width/height,
/// principal point as a fraction of width/height.
struct Intrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.5;
  double cy = 0.5;

  /// Focal lengths pass through softplus; the principal point is unconstrained.
  static Intrinsics from_raw(const std::array<double, 4>& raw) {
    return {softplus(raw[0]), softplus(raw[1]), raw[2], raw[3]};
  }
  std::array<double, 4> to_raw() const { return {inverse_softplus(fx), inverse_softplus(fy), cx, cy}; }
  std::array<double, 4> as_array() const { return {fx, fy, cx, cy}; }

  friend bool operator==(const Intrinsics&, const Intrinsics&) = default;
};

/// The fixed KITTI-style matrix used by the reference baseline.
inline constexpr Intrinsics kBaselineIntrinsics{0.58, 1.92, 0.5, 0.5};

inline Mat3 assemble_k(const Intrinsics& in, int width, int height, int scale = 0) {
  detail::require(scale >= 0, "scale must be non-negative");
  const int div = 1 << scale;
  detail::require(width % div == 0 && height % div == 0,
                  "image size " + std::to_string(width) + "x" + std::to_string(height) +
                      " is not divisible by 2^" + std::to_string(scale));
  const double ws = static_cast<double>(width / div);
  const double hs = static_cast<double>(height / div);
  Mat3 k;
  k << in.fx * ws, 0, in.cx * ws,  //
      0, in.fy * hs, in.cy * hs,   //
      0, 0, 1;
  return k;
}

/// Closed-form inverse of an upper-triangular intrinsics matrix.
inline Mat3 invert_k(const Mat3& k) {
  if (!(k(0, 0) > 0 && k(1, 1) > 0 && k(2, 2) > 0))
    throw PreconditionError("intrinsics matrix needs a positive diagonal");
  if (k(1, 0) != 0 || k(2, 0) != 0 || k(2, 1) != 0)
    throw PreconditionError("intrinsics matrix must be upper-triangular");
  const double a = k(0, 0), s = k(0, 1), c = k(0, 2);
  const double d = k(1, 1), e = k(1, 2), f = k(2, 2);
  Mat3 inv;
  inv << 1 / a, -s / (a * d), (s * e - c * d) / (a * d * f),  //
      0, 1 / d, -e / (d * f),                                  //
      0, 0, 1 / f;
  return inv;
}

inline Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0, -v.z(), v.y(),  //
      v.z(), 0, -v.x(),   //
      -v.y(), v.x(), 0;
  return m;
}

inline constexpr double kSmallAngle = 1e-8;

/// Rodrigues formula; first-order I + [v]x below kSmallAngle.
inline Mat3 axis_angle_to_rotation(const Vec3& v) {
  const double theta = v.norm();
  if (theta < kSmallAngle) return Mat3::Identity() + skew(v);
  const Mat3 k = skew(v / theta);
  return Mat3::Identity() + std::sin(theta) * k + (1 - std::cos(theta)) * k * k;
}

/// dR/dv_k for k = 0, 1, 2, consistent with axis_angle_to_rotation.
///
/// With R = I + A(t)[v]x + B(t)[v]x^2, A = sin t / t, B = (1 - cos t) / t^2:
/// dR/dv_k = A[e_k]x + B([e_k]x[v]x + [v]x[e_k]x) + v_k (A'/t [v]x + B'/t [v]x^2).
inline std::array<Mat3, 3> rotation_jacobian(const Vec3& v) {
  const double t = v.norm();
  std::array<Mat3, 3> d;
  if (t < kSmallAngle) {
    for (int k = 0; k < 3; ++k) d[k] = skew(Vec3::Unit(k));
    return d;
  }
  double a, b, ca, cb;
  const double t2 = t * t;
  if (t < 1e-3) {
    a = 1 - t2 / 6 + t2 * t2 / 120;
    b = 0.5 - t2 / 24 + t2 * t2 / 720;
    ca = -1.0 / 3 + t2 / 30 - t2 * t2 / 840;
    cb = -1.0 / 12 + t2 / 180 - t2 * t2 / 6720;
  } else {
    const double s = std::sin(t), c = std::cos(t);
    a = s / t;
    b = (1 - c) / t2;
    ca = (t * c - s) / (t2 * t);
    cb = (t * s - 2 * (1 - c)) / (t2 * t2);
  }
  const Mat3 vx = skew(v);
  const Mat3 vx2 = vx * vx;
  for (int k = 0; k < 3; ++k) {
    const Mat3 ek = skew(Vec3::Unit(k));
    d[k] = a * ek + b * (ek * vx + vx * ek) + v[k] * (ca * vx + cb * vx2);
  }
  return d;
}

struct RigidTransform {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static RigidTransform identity() { return {}; }

  Mat4 matrix() const {
    Mat4 m = Mat4::Identity();
    m.topLeftCorner<3, 3>() = rotation;
    m.topRightCorner<3, 1>() = translation;
    return m;
  }
  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
  RigidTransform inverse() const { return {rotation.transpose(), -(rotation.transpose() * translation)}; }
};

/// T = [R | t], or its exact inverse [R^T | -R^T t] when `invert` is set.
inline RigidTransform compose_transform(const Vec3& axis_angle, const Vec3& t, bool invert = false) {
  RigidTransform fwd{axis_angle_to_rotation(axis_angle), t};
  return invert ? fwd.inverse() : fwd;
}

/// Affine inverse-depth mapping: disp 0 -> max_depth, disp 1 -> min_depth.
struct DepthRange {
  double min_depth = 0.1;
  double max_depth = 100.0;

  void validate() const {
    if (!(min_depth > 0 && min_depth < max_depth))
      throw PreconditionError("depth range needs 0 < min_depth < max_depth");
  }
  double inv_max() const { return 1.0 / max_depth; }
  double inv_span() const { return 1.0 / min_depth - 1.0 / max_depth; }
  double depth(double disp) const { return 1.0 / (inv_max() + inv_span() * disp); }
  double disparity(double depth) const { return (1.0 / depth - inv_max()) / inv_span(); }
};

inline Grid disparity_to_depth(const Grid& disp, double min_depth, double max_depth) {
  const DepthRange range{min_depth, max_depth};
  range.validate();
  Grid out = disp;
  for (double& v : out.data()) {
    if (!(v >= 0.0 && v <= 1.0)) throw PreconditionError("disparity value outside [0, 1]");
    v = range.depth(v);
  }
  return out;
}

struct PointCloud {
  int width = 0;
  int height = 0;
  std::vector<Vec3> points;  // row-major, one per pixel

  const Vec3& at(int u, int v) const { return points[static_cast<std::size_t>(v) * width + u]; }
};

inline PointCloud backproject(const Grid& depth, const Mat3& k_inv) {
  detail::require(depth.channels() == 1, "backproject needs a 1-channel depth map");
  PointCloud cloud{depth.width(), depth.height(), {}};
  cloud.points.reserve(depth.pixel_count());
  for (int v = 0; v < depth.height(); ++v)
    for (int u = 0; u < depth.width(); ++u) {
      const double z = depth.at(u, v);
      if (!(z > 0)) throw PreconditionError("backproject needs positive depth");
      cloud.points.push_back(z * (k_inv * Vec3(u, v, 1.0)));
    }
  return cloud;
}

inline double normalize_coord(double pixel, int extent) {
  return extent > 1 ? 2.0 * pixel / (extent - 1) - 1.0 : 0.0;
}
inline double unnormalize_coord(double norm, int extent) { return (norm + 1.0) * (extent - 1) / 2.0; }

struct FlowGrid {
  int width = 0;
  int height = 0;
  std::vector<double> x;  // normalized sampling coordinates
  std::vector<double> y;
  std::vector<std::uint8_t> valid;

  FlowGrid() = default;
  FlowGrid(int w, int h)
      : width(w), height(h), x(static_cast<std::size_t>(w) * h), y(x.size()), valid(x.size(), 1) {}

  /// The identity mapping: every pixel samples itself.
  static FlowGrid identity(int w, int h) {
    FlowGrid g(w, h);
    for (int v = 0; v < h; ++v)
      for (int u = 0; u < w; ++u) {
        g.x[static_cast<std::size_t>(v) * w + u] = normalize_coord(u, w);
        g.y[static_cast<std::size_t>(v) * w + u] = normalize_coord(v, h);
      }
    return g;
  }
};

struct ProjectedPoint {
  double u = 0;
  double v = 0;
  double z = 0;  // camera-frame depth after the transform
  bool valid = false;
};

inline ProjectedPoint project_point(const Vec3& p, const Mat3& k, const RigidTransform& t) {
  const Vec3 q = k * t.apply(p);
  ProjectedPoint out;
  out.z = q.z();
  out.valid = q.z() > kMinProjectedDepth;
  if (out.valid) {
    out.u = q.x() / q.z();
    out.v = q.y() / q.z();
  }
  return out;
}

/// p' = K (R P + t); invalid where the transformed depth is <= kMinProjectedDepth.
inline FlowGrid project(const PointCloud& points, const Mat3& k, const RigidTransform& t, int width,
                        int height) {
  detail::require(points.width == width && points.height == height, "point cloud does not match flow size");
  FlowGrid g(width, height);
  for (std::size_t i = 0; i < points.points.size(); ++i) {
    const ProjectedPoint pp = project_point(points.points[i], k, t);
    g.valid[i] = pp.valid ? 1 : 0;
    g.x[i] = pp.valid ? normalize_coord(pp.u, width) : 0.0;
    g.y[i] = pp.valid ? normalize_coord(pp.v, height) : 0.0;
  }
  return g;
}

enum class Padding { Zeros, Border };

struct BilinearTaps {
  int x0 = 0;
  int y0 = 0;
  double fx = 0;  // fractional offsets inside the cell
  double fy = 0;
  int clamp_x = 0;  // -1 / +1 when border padding clamped the coordinate
  int clamp_y = 0;
};

namespace detail {

inline double tap(const Grid& img, int x, int y, int c, Padding pad) {
  if (pad == Padding::Border) {
    x = std::clamp(x, 0, img.width() - 1);
    y = std::clamp(y, 0, img.height() - 1);
    return img.at(x, y, c);
  }
  if (x < 0 || y < 0 || x >= img.width() || y >= img.height()) return 0.0;
  return img.at(x, y, c);
}

}  // namespace detail

/// Cell and weights for sampling at pixel coordinates (u, v).
inline BilinearTaps bilinear_taps(double u, double v, int width, int height, Padding pad) {
  BilinearTaps t;
  if (pad == Padding::Border) {
    if (u < 0) { u = 0; t.clamp_x = -1; }
    else if (u > width - 1) { u = width - 1; t.clamp_x = 1; }
    if (v < 0) { v = 0; t.clamp_y = -1; }
    else if (v > height - 1) { v = height - 1; t.clamp_y = 1; }
  }
  const double fu = std::floor(u), fv = std::floor(v);
  // Far-out coordinates only ever read padding; keep the cell index in int range.
  t.x0 = static_cast<int>(std::clamp(fu, -2.0, static_cast<double>(width) + 1));
  t.y0 = static_cast<int>(std::clamp(fv, -2.0, static_cast<double>(height) + 1));
  t.fx = fu == t.x0 ? u - fu : 0.0;
  t.fy = fv == t.y0 ? v - fv : 0.0;
  return t;
}

inline double bilinear_at(const Grid& img, const BilinearTaps& t, int c, Padding pad) {
  const double v00 = detail::tap(img, t.x0, t.y0, c, pad);
  const double v10 = detail::tap(img, t.x0 + 1, t.y0, c, pad);
  const double v01 = detail::tap(img, t.x0, t.y0 + 1, c, pad);
  const double v11 = detail::tap(img, t.x0 + 1, t.y0 + 1, c, pad);
  return (1 - t.fy) * ((1 - t.fx) * v00 + t.fx * v10) + t.fy * ((1 - t.fx) * v01 + t.fx * v11);
}

inline double sample_pixel(const Grid& img, double u, double v, int c, Padding pad) {
  return bilinear_at(img, bilinear_taps(u, v, img.width(), img.height(), pad), c, pad);
}

/// grid_sample-style bilinear resampling with align-corners coordinates.
inline Grid bilinear_sample(const Grid& image, const FlowGrid& grid, Padding padding) {
  Grid out(grid.width, grid.height, image.channels());
  for (int v = 0; v < grid.height; ++v)
    for (int u = 0; u < grid.width; ++u) {
      const std::size_t i = static_cast<std::size_t>(v) * grid.width + u;
      if (!grid.valid[i]) continue;
      const BilinearTaps t = bilinear_taps(unnormalize_coord(grid.x[i], image.width()),
                                           unnormalize_coord(grid.y[i], image.height()), image.width(),
                                           image.height(), padding);
      for (int c = 0; c < image.channels(); ++c) out.at(u, v, c) = bilinear_at(image, t, c, padding);
    }
  return out;
}

/// Returns t' = K_alt^-1 K t, so that K_alt t' = K t.
inline Vec3 kt_transfer(const Mat3& k, const Vec3& t, const Mat3& k_alt) {
  const Vec3 kt = k * t;
  if (k_alt(1, 0) != 0 || k_alt(2, 0) != 0 || k_alt(2, 1) != 0)
    throw PreconditionError("kt_transfer expects upper-triangular matrices");
  if (k_alt(0, 0) == 0 || k_alt(1, 1) == 0 || k_alt(2, 2) == 0)
    throw PreconditionError("alternative intrinsics matrix is singular");
  // Back substitution keeps the residual of K_alt t' at rounding level.
  Vec3 out;
  out.z() = kt.z() / k_alt(2, 2);
  out.y() = (kt.y() - k_alt(1, 2) * out.z()) / k_alt(1, 1);
  out.x() = (kt.x() - k_alt(0, 1) * out.y() - k_alt(0, 2) * out.z()) / k_alt(0, 0);
  return out;
}

}  // namespace mdepth
