#pragma once

// Dense W x H x C grids of doubles and the area-downsampled image pyramid.
//
// Storage is row-major with interleaved channels: element (x, y, c) lives at
// index (y * width + x) * channels + c.

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mdepth/error.hpp"

namespace mdepth {

class Grid {
 public:
  Grid() = default;

  Grid(int width, int height, int channels, double fill = 0.0)
      : width_(width), height_(height), channels_(channels) {
    check_dims(width, height, channels);
    data_.assign(static_cast<std::size_t>(width) * height * channels, fill);
    if (!std::isfinite(fill)) throw DataError("grid fill value is not finite");
  }

  /// Takes ownership of `data`; every value must be finite.
  Grid(int width, int height, int channels, std::vector<double> data)
      : width_(width), height_(height), channels_(channels), data_(std::move(data)) {
    check_dims(width, height, channels);
    if (data_.size() != static_cast<std::size_t>(width) * height * channels)
      throw PreconditionError("grid data length does not match " + shape_string());
    for (double v : data_)
      if (!std::isfinite(v)) throw DataError("grid contains a non-finite value");
  }

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  int channels() const noexcept { return channels_; }
  std::size_t pixel_count() const noexcept { return static_cast<std::size_t>(width_) * height_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::size_t index(int x, int y, int c = 0) const noexcept {
    return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
  }
  double& at(int x, int y, int c = 0) noexcept { return data_[index(x, y, c)]; }
  double at(int x, int y, int c = 0) const noexcept { return data_[index(x, y, c)]; }
  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }

  bool same_shape(const Grid& o) const noexcept {
    return width_ == o.width_ && height_ == o.height_ && channels_ == o.channels_;
  }
  bool same_size(const Grid& o) const noexcept {
    return width_ == o.width_ && height_ == o.height_;
  }

  std::string shape_string() const {
    return std::to_string(width_) + "x" + std::to_string(height_) + "x" + std::to_string(channels_);
  }

  double mean() const noexcept {
    double s = 0.0;
    for (double v : data_) s += v;
    return data_.empty() ? 0.0 : s / static_cast<double>(data_.size());
  }

  friend bool operator==(const Grid&, const Grid&) = default;

 private:
  static void check_dims(int w, int h, int c) {
    if (w < 1 || h < 1 || c < 1)
      throw PreconditionError("grid dimensions must be positive, got " + std::to_string(w) + "x" +
                              std::to_string(h) + "x" + std::to_string(c));
  }

  int width_ = 0;
  int height_ = 0;
  int channels_ = 0;
  std::vector<double> data_;
};

/// Level 0 is the source; level s has dimensions (W / 2^s, H / 2^s).
struct Pyramid {
  std::vector<Grid> levels;

  std::size_t size() const noexcept { return levels.size(); }
  const Grid& operator[](std::size_t s) const { return levels.at(s); }
};

/// 2x2 block average. Width and height must be even.
inline Grid downsample2x(const Grid& in) {
  detail::require(in.width() % 2 == 0 && in.height() % 2 == 0,
                  "downsample2x needs even dimensions, got " + in.shape_string());
  Grid out(in.width() / 2, in.height() / 2, in.channels());
  for (int y = 0; y < out.height(); ++y)
    for (int x = 0; x < out.width(); ++x)
      for (int c = 0; c < in.channels(); ++c)
        out.at(x, y, c) = 0.25 * (in.at(2 * x, 2 * y, c) + in.at(2 * x + 1, 2 * y, c) +
                                  in.at(2 * x, 2 * y + 1, c) + in.at(2 * x + 1, 2 * y + 1, c));
  return out;
}

/// Adjoint of downsample2x: each coarse value is spread as 1/4 onto its 2x2 block.
inline Grid downsample2x_adjoint(const Grid& coarse) {
  Grid fine(coarse.width() * 2, coarse.height() * 2, coarse.channels());
  for (int y = 0; y < fine.height(); ++y)
    for (int x = 0; x < fine.width(); ++x)
      for (int c = 0; c < fine.channels(); ++c) fine.at(x, y, c) = 0.25 * coarse.at(x / 2, y / 2, c);
  return fine;
}

inline Pyramid build_pyramid(const Grid& image, int num_levels) {
  detail::require(num_levels >= 1, "pyramid needs at least one level");
  const int div = 1 << (num_levels - 1);
  if (image.width() % div != 0 || image.height() % div != 0)
    throw PreconditionError("image " + image.shape_string() + " is not divisible by " +
                            std::to_string(div) + " for a " + std::to_string(num_levels) +
                            "-level pyramid");
  Pyramid pyr;
  pyr.levels.reserve(num_levels);
  pyr.levels.push_back(image);
  for (int s = 1; s < num_levels; ++s) pyr.levels.push_back(downsample2x(pyr.levels.back()));
  return pyr;
}

}  // namespace mdepth
