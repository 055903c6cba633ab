#include <openssl/evp.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mdepth/mdepth.hpp"
#include "mdepth/serialize.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace mdepth;

namespace {

constexpr int kExitDomain = 1;
constexpr int kExitUsage = 2;

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for hashing");
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return hex.str();
}

int default_threads() {
  const char* env = std::getenv("MDEPTH_THREADS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end || n < 1 || n > 1024) throw PreconditionError("MDEPTH_THREADS must be an integer in [1, 1024]");
  return static_cast<int>(n);
}

/// Collects what a run read and wrote, for the manifest.
struct RunRecord {
  json config = json::object();
  std::map<std::string, std::string> inputs, outputs;

  void input(const fs::path& p) { inputs[p.string()] = sha256_file(p); }
  void output(const fs::path& p) { outputs[p.string()] = sha256_file(p); }
};

Grid read_input(RunRecord& rec, const fs::path& p) {
  Grid g = read_image(p);
  rec.input(p);
  return g;
}

void write_output(RunRecord& rec, const Grid& g, const fs::path& p) {
  write_image(g, p, kind_from_extension(p));
  rec.output(p);
}

void write_text(RunRecord& rec, const std::string& text, const fs::path& p) {
  std::ofstream out(p, std::ios::binary);
  if (!out || !(out << text) || !out.flush()) throw IoError("cannot write '" + p.string() + "'");
  out.close();
  rec.output(p);
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory '" + dir.string() + "'");
}

Intrinsics intrinsics_from(const std::vector<double>& v) {
  if (v.size() != 4) throw PreconditionError("intrinsics need 4 values: fx fy cx cy");
  return {v[0], v[1], v[2], v[3]};
}

Padding parse_padding(const std::string& s) {
  if (s == "border") return Padding::Border;
  if (s == "zeros") return Padding::Zeros;
  throw PreconditionError("unknown padding '" + s + "' (border, zeros)");
}

TexturePattern parse_pattern(const std::string& s) {
  if (s == "sinusoids") return TexturePattern::Sinusoids;
  if (s == "stripes") return TexturePattern::Stripes;
  throw PreconditionError("unknown texture pattern '" + s + "' (sinusoids, stripes)");
}

std::pair<int, int> parse_size(const std::string& s) {
  const auto x = s.find('x');
  try {
    std::size_t used = 0;
    if (x == std::string::npos) {
      const int n = std::stoi(s, &used);
      if (used == s.size()) return {n, n};
    } else {
      const int w = std::stoi(s.substr(0, x), &used);
      const std::string rest = s.substr(x + 1);
      std::size_t used_h = 0;
      const int h = std::stoi(rest, &used_h);
      if (used == x && used_h == rest.size()) return {w, h};
    }
  } catch (const std::logic_error&) {
  }
  throw PreconditionError("size must be N or WxH, got '" + s + "'");
}

std::vector<int> parse_int_list(const std::string& s, const char* what) {
  std::vector<int> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      throw PreconditionError(std::string(what) + " must be a comma-separated list of integers, got '" + s + "'");
    }
  }
  return out;
}

std::vector<Pose6> poses_from(const std::vector<double>& v, std::size_t count) {
  if (v.size() != 6 * count)
    throw PreconditionError("expected " + std::to_string(6 * count) + " pose values (6 per source), got " +
                            std::to_string(v.size()));
  std::vector<Pose6> out(count);
  for (std::size_t i = 0; i < v.size(); ++i) out[i / 6][i % 6] = v[i];
  return out;
}

json matrix_json(const Mat3& m) {
  json rows = json::array();
  for (int r = 0; r < 3; ++r) rows.push_back({m(r, 0), m(r, 1), m(r, 2)});
  return rows;
}

struct Command {
  CLI::App* app;
  std::function<json(RunRecord&)> run;
};

// ---- warp ----

struct WarpOpts {
  std::string target, depth, out, reference, padding = "border";
  std::vector<double> pose = std::vector<double>(6, 0.0);
  std::vector<double> intrinsics{kBaselineIntrinsics.fx, kBaselineIntrinsics.fy, kBaselineIntrinsics.cx,
                                 kBaselineIntrinsics.cy};
};

json run_warp(const WarpOpts& o, RunRecord& rec) {
  rec.config = {{"target", o.target},         {"depth", o.depth},   {"pose", o.pose}, {"intrinsics", o.intrinsics},
                {"reference", o.reference}, {"padding", o.padding}, {"out", o.out}};
  const Grid target = read_input(rec, o.target);
  const Grid depth = read_input(rec, o.depth);
  if (depth.channels() != 1) throw DataError("depth map must have one channel");
  if (depth.width() != target.width() || depth.height() != target.height())
    throw DataError("depth map is " + std::to_string(depth.width()) + "x" + std::to_string(depth.height()) +
                    " but the target image is " + std::to_string(target.width()) + "x" +
                    std::to_string(target.height()));
  for (double z : depth.data())
    if (!(z > 0)) throw DataError("depth values must be positive");
  const int w = target.width(), h = target.height();
  const Mat3 k = assemble_k(intrinsics_from(o.intrinsics), w, h);
  const RigidTransform t = compose_transform(Vec3(o.pose[0], o.pose[1], o.pose[2]), Vec3(o.pose[3], o.pose[4], o.pose[5]));
  const FlowGrid flow = project(backproject(depth, invert_k(k)), k, t, w, h);
  const Grid warped = bilinear_sample(target, flow, parse_padding(o.padding));
  Grid valid(w, h, 1);
  std::size_t n_valid = 0;
  for (std::size_t i = 0; i < flow.valid.size(); ++i) {
    valid[i] = flow.valid[i];
    n_valid += flow.valid[i];
  }

  ensure_dir(o.out);
  const std::string ext = fs::path(o.target).extension().string();
  write_output(rec, warped, fs::path(o.out) / ("warped" + ext));
  write_output(rec, valid, fs::path(o.out) / "valid.pfm");

  json result = {{"width", w}, {"height", h}, {"k", matrix_json(k)}, {"valid_fraction", double(n_valid) / valid.size()}};
  if (!o.reference.empty()) {
    const Grid ref = read_input(rec, o.reference);
    if (!ref.same_shape(warped)) throw DataError("reference image shape differs from the warped image");
    result["mean_photometric_error"] = photometric_error(ref, warped, LossConfig{}).mean();
  }
  return result;
}

// ---- loss ----

struct LossOpts {
  std::string target, depth, disparity, padding = "border";
  std::vector<std::string> sources;
  std::vector<double> pose;
  std::vector<double> intrinsics{kBaselineIntrinsics.fx, kBaselineIntrinsics.fy, kBaselineIntrinsics.cx,
                                 kBaselineIntrinsics.cy};
  LossConfig loss;
  std::string scales = "0,1,2,3";
  double min_depth = 0.1, max_depth = 100.0;
  int margin = 0;
};

json run_loss(LossOpts o, RunRecord& rec) {
  o.loss.scales = parse_int_list(o.scales, "scales");
  rec.config = {{"target", o.target},   {"sources", o.sources},       {"depth", o.depth},
                {"disparity", o.disparity}, {"pose", o.pose},         {"intrinsics", o.intrinsics},
                {"loss", to_json(o.loss)}, {"min_depth", o.min_depth}, {"max_depth", o.max_depth},
                {"margin", o.margin},     {"padding", o.padding}};
  if (o.depth.empty() == o.disparity.empty()) throw PreconditionError("give exactly one of --depth or --disparity");
  WarpScene scene;
  scene.target = read_input(rec, o.target);
  for (const auto& s : o.sources) scene.sources.push_back(read_input(rec, s));
  scene.loss = o.loss;
  scene.depth_range = {o.min_depth, o.max_depth};
  scene.depth_range.validate();
  scene.padding = parse_padding(o.padding);
  scene.interior_margin = o.margin;

  ParamGroups p;
  Grid disp = read_input(rec, o.depth.empty() ? o.disparity : o.depth);
  if (disp.channels() != 1) throw DataError("depth or disparity map must have one channel");
  for (double& v : disp.data()) {
    if (!o.depth.empty()) {
      if (!(v >= o.min_depth && v <= o.max_depth)) throw DataError("depth values must lie within [min_depth, max_depth]");
      v = scene.depth_range.disparity(v);
    }
    v = std::clamp(v, 1e-12, 1 - 1e-12);
  }
  p.inv_depth = disp;
  for (double& v : p.inv_depth.data()) v = logit(v);
  p.pose = poses_from(o.pose.empty() ? std::vector<double>(6 * o.sources.size(), 0.0) : o.pose, o.sources.size());
  p.intrinsics_raw = intrinsics_from(o.intrinsics).to_raw();
  const LossBreakdown b = evaluate_loss(scene, p);
  return to_json(b);
}

// ---- gradcheck ----

struct GradcheckOpts {
  std::string size = "16x16";
  std::uint64_t seed = 0;
  GradcheckOptions check;
  bool instances = false;
};

json run_gradcheck(const GradcheckOpts& o, RunRecord& rec, bool& passed) {
  const auto [w, h] = parse_size(o.size);
  rec.config = {{"size", o.size},         {"seed", o.seed},  {"samples", o.check.samples}, {"step", o.check.h},
                {"tol", o.check.tol},     {"instances", o.instances}, {"kink_window", o.check.kink_window}};
  const CheckProblem cp = make_check_problem(w, h, o.seed, o.instances);
  GradcheckOptions opt = o.check;
  opt.seed = o.seed;
  const GradReport r = gradcheck(cp.scene, cp.params, opt);
  passed = r.pass;
  return to_json(r);
}

// ---- train-toy ----

struct TrainOpts {
  std::string size = "64", profile = "fronto", free = "depth", out, pattern = "sinusoids", sources = "0,1";
  int steps = 2000;
  double lr = 1e-4, weight_decay = 5e-2, pose_magnitude = 0.05, texture_freq = 0.01, base_depth = 1.0;
  std::uint64_t seed = 0;
  int margin = 2;
  bool constant_lr = false;
};

json run_train(const TrainOpts& o, RunRecord& rec) {
  const auto [w, h] = parse_size(o.size);
  rec.config = {{"size", o.size},   {"profile", o.profile},         {"free", o.free},
                {"steps", o.steps}, {"lr", o.lr},                   {"weight_decay", o.weight_decay},
                {"seed", o.seed},   {"pose_magnitude", o.pose_magnitude}, {"texture_freq", o.texture_freq},
                {"base_depth", o.base_depth}, {"pattern", o.pattern}, {"sources", o.sources},
                {"margin", o.margin}, {"constant_lr", o.constant_lr}, {"out", o.out}};
  SceneSpec sp;
  sp.width = w;
  sp.height = h;
  sp.profile = parse_profile(o.profile);
  sp.pattern = parse_pattern(o.pattern);
  sp.pose_magnitude = o.pose_magnitude;
  sp.texture_freq = o.texture_freq;
  sp.base_depth = o.base_depth;
  sp.seed = o.seed;
  const FreeSet free = FreeSet::parse(o.free);
  const SyntheticScene scene = select_sources(make_scene(sp), parse_int_list(o.sources, "sources"));
  TrainConfig cfg;
  cfg.steps = o.steps;
  cfg.adamw.lr = o.lr;
  cfg.adamw.weight_decay = o.weight_decay;
  cfg.adamw.cosine = !o.constant_lr;
  cfg.interior_margin = o.margin;
  const TrainResult r = optimize(scene, free, cfg);
  const Grid depth = recovered_depth(r.params, scene.depth_range);

  Grid interior(w, h, 1);
  for (int y = o.margin; y < h - o.margin; ++y)
    for (int x = o.margin; x < w - o.margin; ++x) interior.at(x, y) = 1;
  EvalConfig ec;
  ec.min_depth = scene.depth_range.min_depth;
  ec.max_depth = scene.depth_range.max_depth;
  const DepthMetrics m = compute_metrics(scene.gt_depth, depth, interior, ec);

  ensure_dir(o.out);
  const fs::path dir(o.out);
  write_output(rec, depth, dir / "depth.pfm");
  json params = to_json(r.params);
  params["gt"] = to_json(scene.gt_params());
  write_text(rec, params.dump(2) + "\n", dir / "params.json");
  std::ostringstream csv;
  csv << "step,loss\n" << std::setprecision(17);
  for (std::size_t i = 0; i < r.history.size(); ++i) csv << i << "," << r.history[i] << "\n";
  write_text(rec, csv.str(), dir / "history.csv");
  return {{"initial_loss", r.history.front()},
          {"final_loss", r.history.back()},
          {"steps", o.steps},
          {"interior_metrics", to_json(m)},
          {"intrinsics", to_json(r.params.intrinsics())},
          {"pose", r.params.pose}};
}

// ---- eval ----

struct EvalOpts {
  std::string gt, pred, out, log_base = "e";
  EvalConfig cfg;
};

json run_eval(EvalOpts o, RunRecord& rec) {
  if (o.log_base == "10") o.cfg.log_base = LogBase::Ten;
  else if (o.log_base != "e") throw PreconditionError("log base must be 'e' or '10'");
  rec.config = {{"gt", o.gt},
                {"pred", o.pred},
                {"min_depth", o.cfg.min_depth},
                {"max_depth", o.cfg.max_depth},
                {"median_scaling", o.cfg.median_scaling},
                {"log_base", o.log_base},
                {"out", o.out}};
  if (!fs::is_directory(o.gt)) throw IoError("ground-truth directory '" + o.gt + "' does not exist");
  if (!fs::is_directory(o.pred)) throw IoError("prediction directory '" + o.pred + "' does not exist");
  std::vector<fs::path> names;
  for (const auto& e : fs::directory_iterator(o.gt))
    if (e.is_regular_file() && e.path().extension() == ".pfm") names.push_back(e.path().filename());
  std::sort(names.begin(), names.end());
  if (names.empty()) throw DataError("no .pfm files in '" + o.gt + "'");

  std::vector<DepthMetrics> per;
  json images = json::array();
  for (const auto& name : names) {
    const fs::path gp = fs::path(o.gt) / name, pp = fs::path(o.pred) / name;
    if (!fs::exists(pp)) throw DataError("prediction for '" + name.string() + "' is missing");
    const Grid gt = read_input(rec, gp), pred = read_input(rec, pp);
    if (gt.channels() != 1 || pred.channels() != 1) throw DataError("depth maps must have one channel");
    Grid valid(gt.width(), gt.height(), 1);
    for (std::size_t i = 0; i < gt.size(); ++i) valid[i] = gt[i] > 0;
    per.push_back(compute_metrics(gt, pred, valid, o.cfg));
    images.push_back({{"name", name.string()}, {"metrics", to_json(per.back())}});
  }
  const DepthMetrics mean = aggregate(per);
  const std::vector<NamedMetrics> rows{{"mean", mean}};
  json result = {{"images", images}, {"mean", to_json(mean)}, {"table", format_report(rows).text}};
  if (!o.out.empty()) write_text(rec, result.dump(2) + "\n", o.out);
  return result;
}

// ---- augment ----

struct AugmentOpts {
  std::string in, out;
  WeatherConfig cfg;
};

json run_augment(const AugmentOpts& o, RunRecord& rec) {
  rec.config = {{"in", o.in}, {"out", o.out}, {"seed", o.cfg.seed}, {"p", o.cfg.p_each}};
  const AugmentResult r = augment(read_input(rec, o.in), o.cfg);
  write_output(rec, r.image, o.out);
  json applied = json::array();
  for (const auto& p : r.applied) applied.push_back(to_json(p));
  return {{"applied", applied}};
}

// ---- shuffle ----

struct ShuffleOpts {
  std::string in, out;
  int factor = 2;
  bool inverse = false;
};

json run_shuffle(const ShuffleOpts& o, RunRecord& rec) {
  rec.config = {{"in", o.in}, {"out", o.out}, {"factor", o.factor}, {"inverse", o.inverse}};
  const Grid in = read_input(rec, o.in);
  const Grid out = o.inverse ? pixel_unshuffle(in, o.factor) : pixel_shuffle(in, o.factor);
  write_output(rec, out, o.out);
  return {{"in_shape", {in.width(), in.height(), in.channels()}},
          {"out_shape", {out.width(), out.height(), out.channels()}}};
}

// ---- maskadjust ----

struct MaskOpts {
  std::string disparity, instances, out, mask_out, strategy = "median";
  double threshold = 0.7;
};

json run_maskadjust(const MaskOpts& o, RunRecord& rec) {
  rec.config = {{"disparity", o.disparity}, {"instances", o.instances}, {"out", o.out},
                {"mask_out", o.mask_out},   {"strategy", o.strategy},   {"threshold", o.threshold}};
  AdjustConfig cfg;
  cfg.confidence_threshold = o.threshold;
  if (o.strategy == "median") cfg.strategy = AdjustStrategy::MedianFlatten;
  else if (o.strategy == "none") cfg.strategy = AdjustStrategy::None;
  else throw PreconditionError("unknown strategy '" + o.strategy + "' (median, none)");
  const Grid disp = read_input(rec, o.disparity);
  rec.input(o.instances);
  const std::vector<InstanceMask> inst = load_instance_manifest(o.instances);
  for (const auto& e : json::parse(std::ifstream(o.instances)))
    rec.input(fs::path(o.instances).parent_path() / e["mask_file"].get<std::string>());
  const Grid merged = merge_masks(inst, cfg, disp.width(), disp.height());
  const Grid out = adjust_disparity(disp, inst, cfg);
  write_output(rec, out, o.out);
  if (!o.mask_out.empty()) write_output(rec, merged, o.mask_out);
  std::size_t qualifying = 0, covered = 0;
  for (const auto& m : inst) qualifying += m.confidence >= cfg.confidence_threshold && cfg.class_allowlist.count(m.class_id);
  for (double v : merged.data()) covered += v > 0.5;
  return {{"instances", inst.size()}, {"qualifying", qualifying}, {"covered_pixels", covered}};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Monocular depth self-supervision toolkit"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "worker threads (default: $MDEPTH_THREADS or 1)")->check(CLI::Range(1, 1024));

  std::map<std::string, Command> commands;
  bool gradcheck_passed = true;

  WarpOpts warp;
  {
    auto* c = app.add_subcommand("warp", "resynthesize a view of the target under a pose");
    c->add_option("--target", warp.target, "target image (ppm, pgm or pfm)")->required();
    c->add_option("--depth", warp.depth, "target depth map (pfm)")->required();
    c->add_option("--pose", warp.pose, "rx ry rz tx ty tz")->expected(6);
    c->add_option("--intrinsics", warp.intrinsics, "normalized fx fy cx cy")->expected(4);
    c->add_option("--reference", warp.reference, "image to compare the warp against");
    c->add_option("--padding", warp.padding, "border or zeros");
    c->add_option("--out", warp.out, "output directory")->required();
    commands["warp"] = {c, [&](RunRecord& r) { return run_warp(warp, r); }};
  }
  LossOpts loss;
  {
    auto* c = app.add_subcommand("loss", "evaluate the multi-scale training loss");
    c->add_option("--target", loss.target, "target image")->required();
    c->add_option("--source", loss.sources, "source image (repeatable)")->required();
    c->add_option("--depth", loss.depth, "target depth map (pfm)");
    c->add_option("--disparity", loss.disparity, "target disparity in [0, 1] (pfm)");
    c->add_option("--pose", loss.pose, "6 values per source: rx ry rz tx ty tz");
    c->add_option("--intrinsics", loss.intrinsics, "normalized fx fy cx cy")->expected(4);
    c->add_option("--alpha", loss.loss.alpha, "SSIM weight")->capture_default_str();
    c->add_option("--mu", loss.loss.mu, "photometric weight")->capture_default_str();
    c->add_option("--lambda", loss.loss.lambda, "smoothness weight")->capture_default_str();
    c->add_option("--scales", loss.scales, "comma-separated pyramid scales")->capture_default_str();
    c->add_option("--min-depth", loss.min_depth)->capture_default_str();
    c->add_option("--max-depth", loss.max_depth)->capture_default_str();
    c->add_option("--margin", loss.margin, "interior margin in pixels")->check(CLI::NonNegativeNumber);
    c->add_option("--padding", loss.padding, "border or zeros");
    commands["loss"] = {c, [&](RunRecord& r) { return run_loss(loss, r); }};
  }
  GradcheckOpts gc;
  {
    auto* c = app.add_subcommand("gradcheck", "compare analytic gradients with central differences");
    c->add_option("--seed", gc.seed)->capture_default_str();
    c->add_option("--samples", gc.check.samples, "coordinates per parameter group")->capture_default_str();
    c->add_option("--tol", gc.check.tol)->capture_default_str();
    c->add_option("--step", gc.check.h, "finite-difference step h")->capture_default_str();
    c->add_option("--size", gc.size, "N or WxH")->capture_default_str();
    c->add_flag("--instances", gc.instances, "include instance masks in the scene");
    commands["gradcheck"] = {c, [&](RunRecord& r) { return run_gradcheck(gc, r, gradcheck_passed); }};
  }
  TrainOpts tt;
  {
    auto* c = app.add_subcommand("train-toy", "recover synthetic scene parameters with AdamW");
    c->add_option("--size", tt.size, "N or WxH")->capture_default_str();
    c->add_option("--profile", tt.profile, "fronto, slanted or two-layer")->capture_default_str();
    c->add_option("--free", tt.free, "comma list of depth, pose, translation, intrinsics")->capture_default_str();
    c->add_option("--steps", tt.steps)->capture_default_str()->check(CLI::NonNegativeNumber);
    c->add_option("--lr", tt.lr)->capture_default_str();
    c->add_option("--weight-decay", tt.weight_decay)->capture_default_str();
    c->add_flag("--constant-lr", tt.constant_lr, "disable cosine annealing");
    c->add_option("--seed", tt.seed)->capture_default_str();
    c->add_option("--pose-magnitude", tt.pose_magnitude)->capture_default_str();
    c->add_option("--texture-freq", tt.texture_freq)->capture_default_str();
    c->add_option("--base-depth", tt.base_depth)->capture_default_str();
    c->add_option("--pattern", tt.pattern, "sinusoids or stripes")->capture_default_str();
    c->add_option("--sources", tt.sources, "source frames to use (0 = t-1, 1 = t+1)")->capture_default_str();
    c->add_option("--margin", tt.margin, "interior margin in pixels")->capture_default_str();
    c->add_option("--out", tt.out, "output directory")->required();
    commands["train-toy"] = {c, [&](RunRecord& r) { return run_train(tt, r); }};
  }
  EvalOpts ev;
  {
    auto* c = app.add_subcommand("eval", "depth metrics over paired pfm files");
    c->add_option("--gt", ev.gt, "ground-truth directory")->required();
    c->add_option("--pred", ev.pred, "prediction directory")->required();
    c->add_option("--min-depth", ev.cfg.min_depth)->capture_default_str();
    c->add_option("--max-depth", ev.cfg.max_depth)->capture_default_str();
    c->add_flag("--median-scaling", ev.cfg.median_scaling);
    c->add_option("--log-base", ev.log_base, "e or 10")->capture_default_str();
    c->add_option("--out", ev.out, "write the JSON report here as well");
    commands["eval"] = {c, [&](RunRecord& r) { return run_eval(ev, r); }};
  }
  AugmentOpts au;
  {
    auto* c = app.add_subcommand("augment", "apply random weather effects to an RGB image");
    c->add_option("--in", au.in, "input ppm")->required();
    c->add_option("--out", au.out, "output ppm")->required();
    c->add_option("--seed", au.cfg.seed)->capture_default_str();
    c->add_option("--p", au.cfg.p_each, "probability of each effect")->capture_default_str();
    commands["augment"] = {c, [&](RunRecord& r) { return run_augment(au, r); }};
  }
  ShuffleOpts sh;
  {
    auto* c = app.add_subcommand("shuffle", "pixel shuffle a multi-channel pfm");
    c->add_option("--in", sh.in, "input pfm")->required();
    c->add_option("--out", sh.out, "output pfm")->required();
    c->add_option("--factor", sh.factor)->capture_default_str();
    c->add_flag("--inverse", sh.inverse, "unshuffle instead");
    commands["shuffle"] = {c, [&](RunRecord& r) { return run_shuffle(sh, r); }};
  }
  MaskOpts mk;
  {
    auto* c = app.add_subcommand("maskadjust", "flatten disparity under instance masks");
    c->add_option("--disparity", mk.disparity, "disparity pfm")->required();
    c->add_option("--instances", mk.instances, "instance manifest json")->required();
    c->add_option("--out", mk.out, "adjusted disparity pfm")->required();
    c->add_option("--mask-out", mk.mask_out, "merged mask output");
    c->add_option("--threshold", mk.threshold)->capture_default_str();
    c->add_option("--strategy", mk.strategy, "median or none")->capture_default_str();
    commands["maskadjust"] = {c, [&](RunRecord& r) { return run_maskadjust(mk, r); }};
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  const auto t0 = std::chrono::steady_clock::now();
  try {
    if (threads == 0) threads = default_threads();
    const CLI::App* chosen = app.get_subcommands().front();
    const std::string name = chosen->get_name();
    RunRecord rec;
    json result = commands.at(name).run(rec);
    json config = rec.config;
    config["threads"] = threads;
    const json manifest = {
        {"subcommand", name},
        {"config", config},
        {"inputs", rec.inputs},
        {"outputs", rec.outputs},
        {"version", kVersion},
        {"duration_s", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()}};
    std::cout << json{{"result", result}, {"manifest", manifest}}.dump(2) << std::endl;
    if (!gradcheck_passed) {
      std::cerr << "gradcheck: analytic and numeric gradients disagree beyond tolerance\n";
      return kExitDomain;
    }
    return 0;
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << " (step " << e.step() << ")\n";
    return kExitDomain;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitDomain;
  } catch (const json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitDomain;
  }
}
