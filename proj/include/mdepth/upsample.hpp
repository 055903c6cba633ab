#pragma once

// Sub-pixel rearrangement (pixel shuffle) and nearest-neighbour upsampling.
//
// Within each r x r output block, offset (i, j) comes from input channel
// c * r^2 + i * r + j.

#include <string>

#include "mdepth/error.hpp"
#include "mdepth/grid.hpp"

namespace mdepth {

inline Grid pixel_shuffle(const Grid& x, int r) {
  if (r < 1) throw PreconditionError("upscale factor must be at least 1");
  const int rr = r * r;
  if (x.channels() % rr != 0)
    throw PreconditionError("pixel_shuffle: " + std::to_string(x.channels()) + " channels not divisible by r^2 = " +
                            std::to_string(rr));
  const int c_out = x.channels() / rr;
  Grid out(x.width() * r, x.height() * r, c_out);
  for (int y = 0; y < x.height(); ++y)
    for (int xx = 0; xx < x.width(); ++xx)
      for (int c = 0; c < c_out; ++c)
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < r; ++j) out.at(r * xx + j, r * y + i, c) = x.at(xx, y, c * rr + i * r + j);
  return out;
}

inline Grid pixel_unshuffle(const Grid& x, int r) {
  if (r < 1) throw PreconditionError("downscale factor must be at least 1");
  if (x.width() % r || x.height() % r)
    throw PreconditionError("pixel_unshuffle: size " + std::to_string(x.width()) + "x" +
                            std::to_string(x.height()) + " not divisible by " + std::to_string(r));
  const int rr = r * r;
  Grid out(x.width() / r, x.height() / r, x.channels() * rr);
  for (int y = 0; y < out.height(); ++y)
    for (int xx = 0; xx < out.width(); ++xx)
      for (int c = 0; c < x.channels(); ++c)
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < r; ++j) out.at(xx, y, c * rr + i * r + j) = x.at(r * xx + j, r * y + i, c);
  return out;
}

inline Grid nearest_upsample(const Grid& x, int factor) {
  if (factor < 1) throw PreconditionError("upsample factor must be at least 1");
  Grid out(x.width() * factor, x.height() * factor, x.channels());
  for (int y = 0; y < out.height(); ++y)
    for (int xx = 0; xx < out.width(); ++xx)
      for (int c = 0; c < x.channels(); ++c) out.at(xx, y, c) = x.at(xx / factor, y / factor, c);
  return out;
}

}  // namespace mdepth
