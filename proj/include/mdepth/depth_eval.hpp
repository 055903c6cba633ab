#pragma once

// Seven-metric depth evaluation: delta accuracies a1..a3, abs_rel, sq_rel,
// rms and log_rms, with optional median scaling.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mdepth/error.hpp"
#include "mdepth/grid.hpp"

namespace mdepth {

struct DepthMetrics {
  double a1 = 0, a2 = 0, a3 = 0;
  double abs_rel = 0, sq_rel = 0, rms = 0, log_rms = 0;

  friend bool operator==(const DepthMetrics&, const DepthMetrics&) = default;
};

enum class LogBase { Natural, Ten };

struct EvalConfig {
  double min_depth = 1e-3;
  double max_depth = 80.0;
  bool median_scaling = false;
  LogBase log_base = LogBase::Natural;

  void validate() const {
    if (!(min_depth > 0 && min_depth < max_depth)) throw PreconditionError("evaluation needs 0 < min_depth < max_depth");
  }
};

/// Median with the even-count midpoint average.
inline double median_of(std::vector<double> v) {
  if (v.empty()) throw PreconditionError("median of an empty set");
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + mid, v.end());
  const double hi = v[mid];
  if (v.size() % 2) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + mid);
  return (lo + hi) / 2;
}

inline DepthMetrics compute_metrics(const Grid& gt, const Grid& pred, const Grid& valid_mask, const EvalConfig& cfg) {
  cfg.validate();
  if (gt.channels() != 1 || pred.channels() != 1 || valid_mask.channels() != 1)
    throw PreconditionError("depth maps and mask must have one channel");
  if (!gt.same_size(pred) || !gt.same_size(valid_mask))
    throw PreconditionError("gt " + gt.shape_string() + ", pred " + pred.shape_string() + " and mask " +
                            valid_mask.shape_string() + " differ in size");
  std::vector<double> g, p;
  for (std::size_t i = 0; i < gt.size(); ++i)
    if (valid_mask[i] > 0.5 && gt[i] > 0) {
      g.push_back(gt[i]);
      p.push_back(pred[i]);
    }
  if (g.empty()) throw PreconditionError("no valid pixels with positive ground truth");
  if (cfg.median_scaling) {
    const double mp = median_of(p);
    if (!(mp > 0)) throw PreconditionError("median scaling needs a positive predicted median");
    const double s = median_of(g) / mp;
    for (double& v : p) v *= s;
  }
  for (double& v : p) v = std::clamp(v, cfg.min_depth, cfg.max_depth);

  const double log_div = cfg.log_base == LogBase::Ten ? std::log(10.0) : 1.0;
  double a1 = 0, a2 = 0, a3 = 0, abs_rel = 0, sq_rel = 0, sq = 0, log_sq = 0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double delta = std::max(g[i] / p[i], p[i] / g[i]);
    a1 += delta < 1.25;
    a2 += delta < 1.25 * 1.25;
    a3 += delta < 1.25 * 1.25 * 1.25;
    const double d = g[i] - p[i];
    abs_rel += std::abs(d) / g[i];
    sq_rel += d * d / g[i];
    sq += d * d;
    const double l = (std::log(g[i]) - std::log(p[i])) / log_div;
    log_sq += l * l;
  }
  const double n = static_cast<double>(g.size());
  return {a1 / n, a2 / n, a3 / n, abs_rel / n, sq_rel / n, std::sqrt(sq / n), std::sqrt(log_sq / n)};
}

/// Unweighted mean of every field, summed in list order.
inline DepthMetrics aggregate(std::span<const DepthMetrics> per_image) {
  if (per_image.empty()) throw PreconditionError("cannot aggregate an empty metric list");
  DepthMetrics s;
  for (const auto& m : per_image) {
    s.a1 += m.a1;
    s.a2 += m.a2;
    s.a3 += m.a3;
    s.abs_rel += m.abs_rel;
    s.sq_rel += m.sq_rel;
    s.rms += m.rms;
    s.log_rms += m.log_rms;
  }
  const double n = static_cast<double>(per_image.size());
  return {s.a1 / n, s.a2 / n, s.a3 / n, s.abs_rel / n, s.sq_rel / n, s.rms / n, s.log_rms / n};
}

inline nlohmann::json to_json(const DepthMetrics& m) {
  return {{"a1", m.a1},           {"a2", m.a2},   {"a3", m.a3},          {"abs_rel", m.abs_rel},
          {"sq_rel", m.sq_rel},   {"rms", m.rms}, {"log_rms", m.log_rms}};
}

struct NamedMetrics {
  std::string name;
  DepthMetrics metrics;
};

struct Report {
  std::string text;
  nlohmann::json json;
};

namespace detail {
// Four decimals, trailing zeros dropped ("0.8770" -> "0.877", "1.0000" -> "1").
inline std::string short_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  std::string s = buf;
  if (s.find('.') != std::string::npos) {
    while (s.back() == '0') s.pop_back();
    if (s.back() == '.') s.pop_back();
  }
  if (s == "-0") s = "0";
  return s;
}
}  // namespace detail

/// Tab-separated table in the column order a1 a2 a3 abs_rel rms log_rms sq_rel,
/// plus a JSON array carrying the same numbers at full precision.
inline Report format_report(std::span<const NamedMetrics> rows) {
  if (rows.empty()) throw PreconditionError("report needs at least one row");
  Report r;
  r.text = "Implementation\ta1\ta2\ta3\tabs_rel\trms\tlog_rms\tsq_rel\n";
  r.json = nlohmann::json::array();
  for (const auto& row : rows) {
    const std::string name = row.name.empty() ? "(unnamed)" : row.name;
    const DepthMetrics& m = row.metrics;
    r.text += name;
    for (double v : {m.a1, m.a2, m.a3, m.abs_rel, m.rms, m.log_rms, m.sq_rel}) r.text += "\t" + detail::short_number(v);
    r.text += "\n";
    nlohmann::json j = to_json(m);
    j["name"] = name;
    r.json.push_back(std::move(j));
  }
  return r;
}

}  // namespace mdepth
