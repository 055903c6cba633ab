#pragma once

// Instance-mask merging and object-coherent disparity adjustment.

#include <algorithm>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "mdepth/error.hpp"
#include "mdepth/grid.hpp"

namespace mdepth {

struct InstanceMask {
  Grid mask;  // 1 channel, {0, 1}
  double confidence = 0;
  int class_id = 0;
};

enum class AdjustStrategy { None, MedianFlatten };

/// COCO category ids (91-id numbering used by common Mask R-CNN checkpoints)
/// for person, vehicles and animals.
inline const std::set<int>& default_class_allowlist() {
  static const std::set<int> ids{1,  2,  3,  4,  5,  6,  7,  8,  9,                    // person, vehicles
                                 16, 17, 18, 19, 20, 21, 22, 23, 24, 25};              // animals
  return ids;
}

struct AdjustConfig {
  double confidence_threshold = 0.7;
  std::set<int> class_allowlist = default_class_allowlist();
  AdjustStrategy strategy = AdjustStrategy::MedianFlatten;
  bool apply_to_smoothness = false;

  void validate() const {
    if (!(confidence_threshold >= 0 && confidence_threshold <= 1))
      throw PreconditionError("confidence threshold must lie in [0, 1]");
  }
  bool qualifies(const InstanceMask& m) const {
    return m.confidence >= confidence_threshold && class_allowlist.contains(m.class_id);
  }
};

namespace detail {
inline void check_instances(const Grid& ref, const std::vector<InstanceMask>& instances) {
  for (const auto& m : instances) {
    if (m.mask.channels() != 1 || !m.mask.same_size(ref))
      throw PreconditionError("instance mask " + m.mask.shape_string() + " does not match " +
                              std::to_string(ref.width()) + "x" + std::to_string(ref.height()));
    if (!(m.confidence >= 0 && m.confidence <= 1)) throw PreconditionError("instance confidence outside [0, 1]");
  }
}
}  // namespace detail

/// Union of all qualifying instance masks.
inline Grid merge_masks(const std::vector<InstanceMask>& instances, const AdjustConfig& cfg, int width,
                        int height) {
  cfg.validate();
  Grid out(width, height, 1);
  detail::check_instances(out, instances);
  for (const auto& m : instances) {
    if (!cfg.qualifies(m)) continue;
    for (std::size_t i = 0; i < out.size(); ++i)
      if (m.mask[i] > 0.5) out[i] = 1.0;
  }
  return out;
}

inline Grid merge_masks(const std::vector<InstanceMask>& instances, const AdjustConfig& cfg) {
  if (instances.empty()) throw PreconditionError("merge_masks without instances needs explicit dimensions");
  return merge_masks(instances, cfg, instances.front().mask.width(), instances.front().mask.height());
}

/// Source index for every pixel of the adjusted map: the pixel itself, or the
/// position of the lower median of the original values under the last
/// qualifying instance that covers it. Ties between equal values resolve to the
/// lower index.
inline std::vector<std::size_t> adjustment_sources(const Grid& disp, const std::vector<InstanceMask>& instances,
                                                   const AdjustConfig& cfg) {
  cfg.validate();
  detail::require(disp.channels() == 1, "disparity must have one channel");
  detail::check_instances(disp, instances);
  std::vector<std::size_t> src(disp.size());
  for (std::size_t i = 0; i < src.size(); ++i) src[i] = i;
  if (cfg.strategy == AdjustStrategy::None) return src;
  std::vector<std::pair<double, std::size_t>> under;
  for (const auto& m : instances) {
    if (!cfg.qualifies(m)) continue;
    under.clear();
    for (std::size_t i = 0; i < disp.size(); ++i)
      if (m.mask[i] > 0.5) under.emplace_back(disp[i], i);
    if (under.empty()) continue;
    const auto mid = under.begin() + static_cast<std::ptrdiff_t>((under.size() - 1) / 2);
    std::nth_element(under.begin(), mid, under.end());
    const std::size_t median_at = mid->second;
    for (std::size_t i = 0; i < disp.size(); ++i)
      if (m.mask[i] > 0.5) src[i] = median_at;
  }
  return src;
}

inline Grid adjust_disparity(const Grid& disp, const std::vector<InstanceMask>& instances, const AdjustConfig& cfg) {
  const auto src = adjustment_sources(disp, instances, cfg);
  Grid out = disp;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = disp[src[i]];
  return out;
}

}  // namespace mdepth
