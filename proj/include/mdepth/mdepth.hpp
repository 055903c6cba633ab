#pragma once

#include "mdepth/augment.hpp"
#include "mdepth/autodiff.hpp"
#include "mdepth/depth_eval.hpp"
#include "mdepth/error.hpp"
#include "mdepth/geometry.hpp"
#include "mdepth/grid.hpp"
#include "mdepth/image_io.hpp"
#include "mdepth/losses.hpp"
#include "mdepth/semantic.hpp"
#include "mdepth/serialize.hpp"
#include "mdepth/toytrain.hpp"
#include "mdepth/upsample.hpp"

namespace mdepth {
inline constexpr const char* kVersion = "0.1.0";
}
