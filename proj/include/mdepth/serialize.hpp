#pragma once

// JSON conversions and the instance-mask manifest reader.

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mdepth/autodiff.hpp"
#include "mdepth/error.hpp"
#include "mdepth/geometry.hpp"
#include "mdepth/image_io.hpp"
#include "mdepth/losses.hpp"
#include "mdepth/semantic.hpp"

namespace mdepth {

inline nlohmann::json to_json(const Intrinsics& in) {
  return {{"fx", in.fx}, {"fy", in.fy}, {"cx", in.cx}, {"cy", in.cy}};
}

inline nlohmann::json to_json(const LossConfig& c) {
  return {{"alpha", c.alpha},     {"mu", c.mu},         {"lambda", c.lambda},
          {"ssim_c1", c.ssim_c1}, {"ssim_c2", c.ssim_c2}, {"scales", c.scales}};
}

inline nlohmann::json to_json(const LossBreakdown& b) {
  nlohmann::json j;
  j["total"] = b.total;
  j["per_scale"] = nlohmann::json::array();
  for (const auto& s : b.per_scale) j["per_scale"].push_back({{"photometric", s.photometric}, {"smoothness", s.smoothness}});
  return j;
}

inline nlohmann::json to_json(const GradReport& r) {
  nlohmann::json j;
  j["pass"] = r.pass;
  j["h"] = r.h;
  j["tol"] = r.tol;
  j["checked"] = r.checked();
  j["max_rel_err"] = r.max_rel_err();
  j["groups"] = nlohmann::json::array();
  for (const auto& g : r.groups)
    j["groups"].push_back({{"name", g.name},
                           {"checked", g.checked},
                           {"max_rel_err", g.max_rel_err},
                           {"mean_rel_err", g.mean_rel_err},
                           {"flagged", g.flagged},
                           {"flagged_max_rel_err", g.flagged_max_rel_err}});
  return j;
}

/// Pose and intrinsics in their mapped form (the depth grid is written separately).
inline nlohmann::json to_json(const ParamGroups& p) {
  nlohmann::json j;
  j["pose"] = p.pose;
  j["intrinsics_raw"] = p.intrinsics_raw;
  j["intrinsics"] = to_json(p.intrinsics());
  return j;
}

/// Reads [{"mask_file": ..., "confidence": ..., "class_id": ...}, ...]; mask
/// paths are relative to the manifest's directory.
inline std::vector<InstanceMask> load_instance_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open instance manifest '" + path.string() + "'");
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("instance manifest is not valid JSON: " + std::string(e.what()), e.byte);
  }
  if (!doc.is_array()) throw DataError("instance manifest must be a JSON array");
  std::vector<InstanceMask> out;
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const auto& e = doc[i];
    if (!e.is_object() || !e.contains("mask_file") || !e.contains("confidence") || !e.contains("class_id") ||
        !e["mask_file"].is_string() || !e["confidence"].is_number() || !e["class_id"].is_number_integer())
      throw DataError("instance manifest entry " + std::to_string(i) +
                      " needs mask_file (string), confidence (number) and class_id (integer)");
    Grid mask = read_image(path.parent_path() / e["mask_file"].get<std::string>(), ImageKind::PgmGray);
    for (double& v : mask.data()) v = v > 0.5 ? 1.0 : 0.0;
    out.push_back({std::move(mask), e["confidence"].get<double>(), e["class_id"].get<int>()});
  }
  return out;
}

}  // namespace mdepth
