#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

#include "json.hpp"
#include "mdepth/mdepth.hpp"
#include "test_support.hpp"

using namespace mdepth;
using json = nlohmann::json;
using testing_support::random_grid;
using testing_support::scratch_dir;

namespace {

struct CliRun {
  int code = -1;
  std::string out, err;
  json doc;
};

std::string slurp_text(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

CliRun cli(const std::filesystem::path& dir, const std::string& args, const std::string& env = "") {
  const auto out = dir / "stdout.txt", err = dir / "stderr.txt";
  const std::string cmd = env + " \"" + std::string(MDEPTH_CLI) + "\" " + args + " >\"" + out.string() + "\" 2>\"" +
                          err.string() + "\"";
  const int status = std::system(cmd.c_str());
  CliRun r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp_text(out);
  r.err = slurp_text(err);
  if (r.code == 0 && r.out.starts_with("{")) r.doc = json::parse(r.out);
  return r;
}

Grid float_valued(Grid g) {
  for (double& v : g.data()) v = static_cast<float>(v);
  return g;
}

}  // namespace

TEST(Cli, EvalOfGroundTruthAgainstItself) {
  const auto dir = scratch_dir("cli_eval");
  std::filesystem::create_directories(dir / "g");
  std::mt19937_64 rng(1);
  for (const char* name : {"a.pfm", "b.pfm"}) write_map(random_grid(12, 8, 1, rng, 1, 60), dir / "g" / name, ImageKind::PfmFloat);
  const CliRun r = cli(dir, "eval --gt " + (dir / "g").string() + " --pred " + (dir / "g").string());
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.doc["result"]["mean"]["a1"].get<double>(), 1.0);
  EXPECT_EQ(r.doc["result"]["mean"]["rms"].get<double>(), 0.0);
  EXPECT_EQ(r.doc["result"]["images"].size(), 2u);
  EXPECT_EQ(r.doc["manifest"]["inputs"].size(), 2u);
}

TEST(Cli, EvalMissingPredictionIsDomainError) {
  const auto dir = scratch_dir("cli_eval_missing");
  std::filesystem::create_directories(dir / "g");
  std::filesystem::create_directories(dir / "p");
  write_map(Grid(4, 4, 1, 5.0), dir / "g" / "a.pfm", ImageKind::PfmFloat);
  const CliRun r = cli(dir, "eval --gt " + (dir / "g").string() + " --pred " + (dir / "p").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("missing"), std::string::npos);
  EXPECT_TRUE(r.out.empty());
}

TEST(Cli, EvalWritesReportToOut) {
  const auto dir = scratch_dir("cli_eval_out");
  std::filesystem::create_directories(dir / "g");
  std::filesystem::create_directories(dir / "p");
  write_map(Grid(2, 1, 1, 1.0), dir / "g" / "a.pfm", ImageKind::PfmFloat);
  write_map(Grid(2, 1, 1, 2.0), dir / "p" / "a.pfm", ImageKind::PfmFloat);
  const CliRun r = cli(dir, "eval --gt " + (dir / "g").string() + " --pred " + (dir / "p").string() + " --out " +
                             (dir / "report.json").string() + " --log-base 10");
  ASSERT_EQ(r.code, 0) << r.err;
  const json report = json::parse(slurp_text(dir / "report.json"));
  EXPECT_EQ(report["mean"]["abs_rel"].get<double>(), 1.0);
  EXPECT_NEAR(report["mean"]["log_rms"].get<double>(), std::log10(2.0), 1e-12);
  EXPECT_EQ(report, r.doc["result"]);
}

TEST(Cli, GradcheckBuiltInScene) {
  const auto dir = scratch_dir("cli_gradcheck");
  const CliRun r = cli(dir, "gradcheck --seed 7 --samples 200 --tol 1e-4");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(r.doc["result"]["pass"].get<bool>());
  EXPECT_LT(r.doc["result"]["max_rel_err"].get<double>(), 1e-4);
  EXPECT_EQ(r.doc["result"]["groups"].size(), 3u);
  EXPECT_EQ(r.doc["manifest"]["subcommand"], "gradcheck");
  EXPECT_EQ(r.doc["manifest"]["version"], kVersion);
  EXPECT_EQ(r.doc["manifest"]["config"]["seed"], 7);
}

TEST(Cli, ShuffleIndivisibleChannels) {
  const auto dir = scratch_dir("cli_shuffle_bad");
  write_image(Grid(3, 3, 5, 0.5), dir / "in.pfm", ImageKind::PfmFloat);
  const CliRun r = cli(dir, "shuffle --factor 3 --in " + (dir / "in.pfm").string() + " --out " + (dir / "o.pfm").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("not divisible"), std::string::npos);
  EXPECT_FALSE(std::filesystem::exists(dir / "o.pfm"));
}

TEST(Cli, ShuffleRoundTrip) {
  const auto dir = scratch_dir("cli_shuffle");
  std::mt19937_64 rng(2);
  const Grid g = float_valued(random_grid(3, 2, 8, rng));
  write_image(g, dir / "in.pfm", ImageKind::PfmFloat);
  const std::string in = (dir / "in.pfm").string(), mid = (dir / "mid.pfm").string(), back = (dir / "back.pfm").string();
  ASSERT_EQ(cli(dir, "shuffle --factor 2 --in " + in + " --out " + mid).code, 0);
  const Grid s = read_image(mid);
  EXPECT_EQ(s.width(), 6);
  EXPECT_EQ(s.channels(), 2);
  ASSERT_EQ(cli(dir, "shuffle --inverse --factor 2 --in " + mid + " --out " + back).code, 0);
  EXPECT_EQ(read_image(back), g);
}

TEST(Cli, WarpZeroPoseReproducesTarget) {
  const auto dir = scratch_dir("cli_warp_zero");
  std::mt19937_64 rng(3);
  write_image(float_valued(random_grid(16, 12, 3, rng)), dir / "t.pfm", ImageKind::PfmFloat);
  write_map(float_valued(random_grid(16, 12, 1, rng, 0.5, 40)), dir / "d.pfm", ImageKind::PfmFloat);
  const CliRun r = cli(dir, "warp --target " + (dir / "t.pfm").string() + " --depth " + (dir / "d.pfm").string() +
                             " --out " + (dir / "o").string() + " --reference " + (dir / "t.pfm").string());
  ASSERT_EQ(r.code, 0) << r.err;
  const Grid t = read_image(dir / "t.pfm"), w = read_image(dir / "o" / "warped.pfm");
  ASSERT_TRUE(w.same_shape(t));
  for (std::size_t i = 0; i < t.size(); ++i) EXPECT_NEAR(w[i], t[i], 1e-9);
  EXPECT_EQ(read_image(dir / "o" / "valid.pfm"), Grid(16, 12, 1, 1.0));
  EXPECT_EQ(r.doc["result"]["valid_fraction"].get<double>(), 1.0);
  EXPECT_LT(r.doc["result"]["mean_photometric_error"].get<double>(), 1e-6);
}

TEST(Cli, WarpTranslationIsUniformShift) {
  const auto dir = scratch_dir("cli_warp_shift");
  std::mt19937_64 rng(4);
  write_image(float_valued(random_grid(20, 10, 3, rng)), dir / "t.pfm", ImageKind::PfmFloat);
  write_map(Grid(20, 10, 1, 2.0), dir / "d.pfm", ImageKind::PfmFloat);
  // fx = 0.5 * 20 = 10 px, d = 2: t_x = 0.4 gives a 2-pixel shift
  const CliRun r = cli(dir, "warp --target " + (dir / "t.pfm").string() + " --depth " + (dir / "d.pfm").string() +
                             " --pose 0 0 0 0.4 0 0 --intrinsics 0.5 0.5 0.5 0.5 --out " + (dir / "o").string());
  ASSERT_EQ(r.code, 0) << r.err;
  const Grid t = read_image(dir / "t.pfm"), w = read_image(dir / "o" / "warped.pfm");
  for (int y = 0; y < 10; ++y)
    for (int x = 0; x + 2 < 20; ++x)
      for (int c = 0; c < 3; ++c) EXPECT_NEAR(w.at(x, y, c), t.at(x + 2, y, c), 1e-9);
}

TEST(Cli, WarpMissingDepthFile) {
  const auto dir = scratch_dir("cli_warp_missing");
  write_image(Grid(4, 4, 3, 0.5), dir / "t.pfm", ImageKind::PfmFloat);
  const CliRun r = cli(dir, "warp --target " + (dir / "t.pfm").string() + " --depth " + (dir / "nope.pfm").string() +
                             " --out " + (dir / "o").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_FALSE(r.err.empty());
}

TEST(Cli, WarpDimensionMismatch) {
  const auto dir = scratch_dir("cli_warp_dims");
  write_image(Grid(4, 4, 3, 0.5), dir / "t.pfm", ImageKind::PfmFloat);
  write_map(Grid(5, 4, 1, 1.0), dir / "d.pfm", ImageKind::PfmFloat);
  const CliRun r = cli(dir, "warp --target " + (dir / "t.pfm").string() + " --depth " + (dir / "d.pfm").string() +
                             " --out " + (dir / "o").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("5x4"), std::string::npos);
}

TEST(Cli, UsageErrors) {
  const auto dir = scratch_dir("cli_usage");
  EXPECT_EQ(cli(dir, "frobnicate").code, 2);
  EXPECT_EQ(cli(dir, "").code, 2);
  EXPECT_EQ(cli(dir, "shuffle --factor 2").code, 2);
  EXPECT_EQ(cli(dir, "gradcheck --samples lots").code, 2);
  EXPECT_EQ(cli(dir, "--help").code, 0);
}

TEST(Cli, LossOfPerfectWarpIsZero) {
  const auto dir = scratch_dir("cli_loss");
  std::mt19937_64 rng(5);
  write_image(float_valued(random_grid(16, 16, 3, rng)), dir / "t.pfm", ImageKind::PfmFloat);
  write_map(Grid(16, 16, 1, 0.25), dir / "disp.pfm", ImageKind::PfmFloat);
  const std::string t = (dir / "t.pfm").string();
  const CliRun r = cli(dir, "loss --target " + t + " --source " + t + " --source " + t + " --disparity " +
                             (dir / "disp.pfm").string());
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NEAR(r.doc["result"]["total"].get<double>(), 0.0, 1e-12);
  EXPECT_EQ(r.doc["result"]["per_scale"].size(), 4u);
  const CliRun bad = cli(dir, "loss --target " + t + " --source " + t + " --disparity " + (dir / "disp.pfm").string() +
                               " --pose 0 0 0");
  EXPECT_EQ(bad.code, 1);
}

TEST(Cli, AugmentIsReproducibleAndRecorded) {
  const auto dir = scratch_dir("cli_augment");
  std::mt19937_64 rng(6);
  write_image(random_grid(24, 16, 3, rng), dir / "in.ppm", ImageKind::PpmColor);
  const std::string base = "augment --seed 11 --p 0.9 --in " + (dir / "in.ppm").string() + " --out ";
  const CliRun a = cli(dir, base + (dir / "a.ppm").string());
  const CliRun b = cli(dir, base + (dir / "b.ppm").string());
  ASSERT_EQ(a.code, 0) << a.err;
  ASSERT_EQ(b.code, 0) << b.err;
  EXPECT_EQ(a.doc["result"], b.doc["result"]);
  EXPECT_EQ(a.doc["manifest"]["inputs"], b.doc["manifest"]["inputs"]);
  EXPECT_EQ(a.doc["manifest"]["outputs"][(dir / "a.ppm").string()],
            b.doc["manifest"]["outputs"][(dir / "b.ppm").string()]);
  EXPECT_EQ(a.doc["manifest"]["inputs"][(dir / "in.ppm").string()].get<std::string>().size(), 64u);
  EXPECT_GT(a.doc["result"]["applied"].size(), 0u);
  const CliRun none = cli(dir, "augment --p 0 --in " + (dir / "in.ppm").string() + " --out " + (dir / "c.ppm").string());
  ASSERT_EQ(none.code, 0);
  EXPECT_EQ(none.doc["result"]["applied"].size(), 0u);
  EXPECT_EQ(slurp_text(dir / "c.ppm"), slurp_text(dir / "in.ppm"));
}

TEST(Cli, TrainToyWritesArtifacts) {
  const auto dir = scratch_dir("cli_train");
  const CliRun r = cli(dir, "train-toy --size 32 --profile slanted --free depth --steps 20 --lr 1e-3 --seed 4 --out " +
                             (dir / "o").string());
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read_image(dir / "o" / "depth.pfm").width(), 32);
  const json params = json::parse(slurp_text(dir / "o" / "params.json"));
  EXPECT_EQ(params["pose"].size(), 2u);
  std::ifstream csv(dir / "o" / "history.csv");
  std::string line;
  int lines = 0;
  while (std::getline(csv, line)) ++lines;
  EXPECT_EQ(lines, 1 + 21);
  EXPECT_LT(r.doc["result"]["final_loss"].get<double>(), r.doc["result"]["initial_loss"].get<double>());
  EXPECT_EQ(r.doc["manifest"]["outputs"].size(), 3u);

  const CliRun again = cli(dir, "train-toy --size 32 --profile slanted --free depth --steps 20 --lr 1e-3 --seed 4 --out " +
                                 (dir / "o").string());
  EXPECT_EQ(again.doc["manifest"]["outputs"], r.doc["manifest"]["outputs"]);
  EXPECT_EQ(cli(dir, "train-toy --profile spiral --out " + (dir / "p").string()).code, 1);
  EXPECT_EQ(cli(dir, "train-toy --free wheels --out " + (dir / "p").string()).code, 1);
}

TEST(Cli, MaskAdjust) {
  const auto dir = scratch_dir("cli_mask");
  write_map(Grid(3, 2, 1, std::vector<double>{0.25, 0.125, 0.5, 0.75, 0.875, 1.0}), dir / "disp.pfm",
            ImageKind::PfmFloat);
  write_map(Grid(3, 2, 1, std::vector<double>{1, 1, 1, 0, 0, 0}), dir / "m0.pgm", ImageKind::PgmGray);
  write_map(Grid(3, 2, 1, std::vector<double>{0, 0, 0, 1, 1, 1}), dir / "m1.pgm", ImageKind::PgmGray);
  std::ofstream(dir / "inst.json") << R"([{"mask_file": "m0.pgm", "confidence": 0.8, "class_id": 1},
                                          {"mask_file": "m1.pgm", "confidence": 0.6, "class_id": 1}])";
  const CliRun r = cli(dir, "maskadjust --disparity " + (dir / "disp.pfm").string() + " --instances " +
                             (dir / "inst.json").string() + " --out " + (dir / "out.pfm").string() + " --mask-out " +
                             (dir / "mask.pgm").string());
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read_image(dir / "out.pfm"), Grid(3, 2, 1, std::vector<double>{0.25, 0.25, 0.25, 0.75, 0.875, 1.0}));
  EXPECT_EQ(r.doc["result"]["qualifying"], 1);
  EXPECT_EQ(r.doc["result"]["covered_pixels"], 3);
  EXPECT_EQ(r.doc["manifest"]["inputs"].size(), 4u);

  std::ofstream(dir / "broken.json") << R"([{"mask_file": 3}])";
  EXPECT_EQ(cli(dir, "maskadjust --disparity " + (dir / "disp.pfm").string() + " --instances " +
                         (dir / "broken.json").string() + " --out " + (dir / "x.pfm").string())
                .code,
            1);
}

TEST(Cli, ThreadCountFromEnvironment) {
  const auto dir = scratch_dir("cli_threads");
  const CliRun r = cli(dir, "gradcheck --size 8 --samples 5", "MDEPTH_THREADS=3");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.doc["manifest"]["config"]["threads"], 3);
  const CliRun flag = cli(dir, "--threads 2 gradcheck --size 8 --samples 5", "MDEPTH_THREADS=3");
  EXPECT_EQ(flag.doc["manifest"]["config"]["threads"], 2);
  EXPECT_EQ(cli(dir, "gradcheck --size 8 --samples 5", "MDEPTH_THREADS=zero").code, 1);
}
