#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "ldnet/checkpoint.hpp"
#include "ldnet/data.hpp"
#include "ldnet/image_io.hpp"
#include "ldnet/metrics.hpp"
#include "ldnet/model.hpp"
#include "test_support.hpp"

namespace fs = std::filesystem;

namespace ldnet {
namespace {

struct RunResult {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

RunResult ldnet_cli(const std::string& args) {
  static int counter = 0;
  const auto dir = fs::temp_directory_path() / "ldnet_cli_capture";
  fs::create_directories(dir);
  const auto out = dir / ("out" + std::to_string(counter) + ".txt");
  const auto err = dir / ("err" + std::to_string(counter++) + ".txt");
  const std::string cmd = std::string(LDNET_CLI_PATH) + " " + args + " >" + out.string() + " 2>" + err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

// Loss column of every row in a training log.
std::vector<double> log_losses(const fs::path& log) {
  std::vector<double> out;
  for (const auto& l : lines(slurp(log))) {
    if (l.empty() || l[0] == '#' || l.rfind("epoch", 0) == 0) continue;
    std::vector<std::string> cols;
    std::istringstream in(l);
    for (std::string c; std::getline(in, c, ',');) cols.push_back(c);
    out.push_back(std::stod(cols.at(3)));
  }
  return out;
}

std::vector<fs::path> files_under(const fs::path& root) {
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out.push_back(fs::relative(e.path(), root));
  std::sort(out.begin(), out.end());
  return out;
}

// Small binary run shared by the eval and infer tests.
class TrainedRun : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = test::temp_dir("cli_trained");
    ASSERT_EQ(ldnet_cli("synth --out " + (root_ / "data").string() + " --count 8 --classes 2 --seed 4 --size 64").code, 0);
    const auto r = ldnet_cli("train --data " + (root_ / "data").string() + " --out " + (root_ / "run").string() +
                             " --max-epochs 3 --base-width 4 --classes 2 --image-size 32 --set split_train=0.75");
    ASSERT_EQ(r.code, 0) << r.err;
  }
  static fs::path data() { return root_ / "data"; }
  static fs::path run() { return root_ / "run"; }
  static inline fs::path root_;
};

TEST(CliSynth, WritesCountPairsAndManifest) {
  const auto dir = test::temp_dir("cli_synth_count");
  const auto r = ldnet_cli("synth --out " + dir.string() + " --count 12 --seed 1 --size 64");
  ASSERT_EQ(r.code, 0) << r.err;
  std::size_t images = 0, labels = 0;
  for (const auto& e : fs::directory_iterator(dir / "images")) images += e.path().extension() == ".png";
  for (const auto& e : fs::directory_iterator(dir / "labels")) labels += e.path().extension() == ".png";
  EXPECT_EQ(images, 12u);
  EXPECT_EQ(labels, 12u);
  EXPECT_NE(slurp(dir / "manifest.json").find("\"count\": 12"), std::string::npos);
  EXPECT_EQ(load_dataset(dir, 2).size(), 12u);
}

TEST(CliSynth, SameSeedGivesByteIdenticalTrees) {
  const auto a = test::temp_dir("cli_synth_a"), b = test::temp_dir("cli_synth_b");
  ASSERT_EQ(ldnet_cli("synth --out " + a.string() + " --count 5 --seed 9 --size 64").code, 0);
  ASSERT_EQ(ldnet_cli("synth --out " + b.string() + " --count 5 --seed 9 --size 64").code, 0);
  const auto fa = files_under(a), fb = files_under(b);
  ASSERT_EQ(fa, fb);
  for (const auto& f : fa) EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
}

TEST(CliSynth, FiveClassLabelsStayInRange) {
  const auto dir = test::temp_dir("cli_synth_five");
  ASSERT_EQ(ldnet_cli("synth --out " + dir.string() + " --count 6 --classes 5 --seed 2 --size 64").code, 0);
  std::uint8_t top = 0;
  for (const auto& e : fs::directory_iterator(dir / "labels")) {
    const auto img = read_png(e.path(), 1);
    for (auto v : img.pixels) {
      EXPECT_LT(v, 5);
      top = std::max(top, v);
    }
  }
  EXPECT_GE(top, 2);
}

TEST(CliSynth, UnwritablePathFails) {
  const auto dir = test::temp_dir("cli_synth_bad");
  std::ofstream(dir / "file") << "x";
  const auto r = ldnet_cli("synth --out " + (dir / "file" / "sub").string() + " --count 1");
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(r.err.rfind("error:", 0), 0u) << r.err;
}

TEST(CliTrain, OverfitsThirtyTwoSamples) {
  const auto dir = test::temp_dir("cli_train_overfit");
  ASSERT_EQ(ldnet_cli("synth --out " + (dir / "data").string() + " --count 32 --seed 3 --size 64").code, 0);
  const auto r = ldnet_cli("train --data " + (dir / "data").string() + " --out " + (dir / "run").string() +
                           " --max-epochs 15 --base-width 8 --classes 2 --image-size 64 --lr 5e-3"
                           " --set kp_inverted=true");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto losses = log_losses(dir / "run" / "train_log.csv");
  ASSERT_EQ(losses.size(), 15u);
  EXPECT_LT(losses.back(), 0.25 * losses.front());
  EXPECT_TRUE(fs::exists(dir / "run" / "checkpoint.ldn"));
  EXPECT_TRUE(fs::exists(dir / "run" / "metrics_test.json"));
}

TEST(CliTrain, ZeroEpochsEvaluatesInitialWeights) {
  const auto dir = test::temp_dir("cli_train_zero");
  ASSERT_EQ(ldnet_cli("synth --out " + (dir / "data").string() + " --count 6 --size 32").code, 0);
  const auto r = ldnet_cli("train --data " + (dir / "data").string() + " --out " + (dir / "run").string() +
                           " --max-epochs 0 --base-width 2 --classes 2 --image-size 32");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(log_losses(dir / "run" / "train_log.csv").empty());
  const auto json = slurp(dir / "run" / "metrics_test.json");
  EXPECT_NE(json.find("lane_classes"), std::string::npos);
  EXPECT_NE(json.find("all_classes"), std::string::npos);
}

TEST(CliTrain, InvalidValuesAreListedTogether) {
  const auto dir = test::temp_dir("cli_train_invalid");
  const auto r = ldnet_cli("train --data " + dir.string() + " --out " + (dir / "run").string() +
                           " --lr -1 --set batch_size=0 --set colour=red");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("error: initial_lr"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("error: batch_size"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("error: colour: unknown key"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(dir / "run"));
}

TEST(CliTrain, ConfigEchoReproducesTheRun) {
  const auto dir = test::temp_dir("cli_train_echo");
  ASSERT_EQ(ldnet_cli("synth --out " + (dir / "data").string() + " --count 6 --size 32 --seed 5").code, 0);
  const auto first = ldnet_cli("train --data " + (dir / "data").string() + " --out " + (dir / "a").string() +
                               " --max-epochs 2 --base-width 2 --classes 2 --image-size 32 --seed 8");
  ASSERT_EQ(first.code, 0) << first.err;
  const auto echo = slurp(dir / "a" / "config.txt");
  const auto log = lines(slurp(dir / "a" / "train_log.csv"));
  const auto metrics = slurp(dir / "a" / "metrics_test.json");

  const auto second = ldnet_cli("train --config " + (dir / "a" / "config.txt").string());
  ASSERT_EQ(second.code, 0) << second.err;
  EXPECT_EQ(slurp(dir / "a" / "config.txt"), echo);
  EXPECT_EQ(slurp(dir / "a" / "metrics_test.json"), metrics);
  const auto relog = lines(slurp(dir / "a" / "train_log.csv"));
  ASSERT_EQ(relog.size(), log.size());
  EXPECT_EQ(relog[0].rfind("# started ", 0), 0u);
  // Everything but the timestamp line is byte-identical.
  for (std::size_t i = 1; i < log.size(); ++i) EXPECT_EQ(relog[i], log[i]);
}

TEST(CliTrain, ResumeMatchesUninterruptedRun) {
  const auto dir = test::temp_dir("cli_train_resume");
  const auto data = (dir / "data").string();
  ASSERT_EQ(ldnet_cli("synth --out " + data + " --count 6 --size 32 --seed 6").code, 0);
  const std::string common = " --base-width 2 --classes 2 --image-size 32 --seed 3";
  ASSERT_EQ(ldnet_cli("train --data " + data + " --out " + (dir / "full").string() + " --max-epochs 4" + common).code,
            0);
  ASSERT_EQ(ldnet_cli("train --data " + data + " --out " + (dir / "part").string() + " --max-epochs 4 --stop-after 2" +
                           common).code,
            0);
  const auto r = ldnet_cli("train --resume --data " + data + " --out " + (dir / "part").string() + " --max-epochs 4" +
                           common);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("resumed after epoch 2"), std::string::npos);
  const auto full = lines(slurp(dir / "full" / "train_log.csv"));
  const auto part = lines(slurp(dir / "part" / "train_log.csv"));
  ASSERT_EQ(full.size(), part.size());
  for (std::size_t i = 1; i < full.size(); ++i) EXPECT_EQ(part[i], full[i]);
}

TEST_F(TrainedRun, EvalIsDeterministicAndMatchesDumpedMasks) {
  const auto dir = test::temp_dir("cli_eval_dump");
  const std::string base = "eval --checkpoint " + (run() / "checkpoint.ldn").string() + " --data " + data().string() +
                           " --config " + (run() / "config.txt").string() + " --split all";
  const auto a = ldnet_cli(base + " --out " + (dir / "a.json").string() + " --dump-masks " + (dir / "masks").string());
  ASSERT_EQ(a.code, 0) << a.err;
  const auto b = ldnet_cli(base + " --out " + (dir / "b.json").string());
  ASSERT_EQ(b.code, 0) << b.err;
  EXPECT_EQ(slurp(dir / "a.json"), slurp(dir / "b.json"));
  EXPECT_EQ(a.out, slurp(dir / "a.json"));

  // Independent recount from the dumped masks against the resized labels.
  ConfusionCounts counts(2);
  for (const auto& s : load_dataset(data(), 2)) {
    const auto gt = resize_sample(s, 32);
    const auto pred = read_png(dir / "masks" / (s.id + ".png"), 1);
    ASSERT_EQ(pred.pixels.size(), gt.label.size());
    counts.accumulate(pred.pixels, gt.label);
  }
  EXPECT_EQ(reports_json(counts) + "\n", slurp(dir / "a.json"));
}

TEST_F(TrainedRun, EvalRejectsClassMismatch) {
  const auto dir = test::temp_dir("cli_eval_mismatch");
  ASSERT_EQ(ldnet_cli("synth --out " + dir.string() + " --count 2 --classes 5 --size 32").code, 0);
  const auto r = ldnet_cli("eval --checkpoint " + (run() / "checkpoint.ldn").string() + " --data " + dir.string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("error: class-count mismatch"), std::string::npos) << r.err;
  const auto flag = ldnet_cli("eval --checkpoint " + (run() / "checkpoint.ldn").string() + " --data " +
                              data().string() + " --classes 5");
  EXPECT_EQ(flag.code, 1);
}

TEST_F(TrainedRun, InferWritesMaskAndMatchingOverlay) {
  const auto a = test::temp_dir("cli_infer_a"), b = test::temp_dir("cli_infer_b");
  // 256 x 256 input regardless of the training resolution.
  auto scene = synth_scene(77);
  scene.id = "scene";
  save_sample(a / "src", scene);
  const auto image = (a / "src" / "images" / "scene.png").string();
  const std::string ckpt = (run() / "checkpoint.ldn").string();
  ASSERT_EQ(ldnet_cli("infer --checkpoint " + ckpt + " --image " + image + " --out " + a.string()).code, 0);
  ASSERT_EQ(ldnet_cli("infer --checkpoint " + ckpt + " --image " + image + " --out " + b.string()).code, 0);

  const auto mask = read_png(a / "scene_mask.png", 1);
  const auto overlay = read_png(a / "scene_overlay.png", 4);
  ASSERT_EQ(mask.width, 256u);
  ASSERT_EQ(mask.height, 256u);
  ASSERT_EQ(overlay.pixels.size(), mask.pixels.size() * 4);
  for (std::size_t i = 0; i < mask.pixels.size(); ++i) {
    EXPECT_LT(mask.pixels[i], 2);
    const bool painted = overlay.pixels[4 * i] | overlay.pixels[4 * i + 1] | overlay.pixels[4 * i + 2] |
                         overlay.pixels[4 * i + 3];
    ASSERT_EQ(painted, mask.pixels[i] != 0) << "pixel " << i;
    if (mask.pixels[i] == 1) {
      EXPECT_EQ(overlay.pixels[4 * i], 255);
      EXPECT_EQ(overlay.pixels[4 * i + 3], 255);
    }
  }
  EXPECT_EQ(slurp(a / "scene_mask.png"), slurp(b / "scene_mask.png"));
  EXPECT_EQ(slurp(a / "scene_overlay.png"), slurp(b / "scene_overlay.png"));
}

TEST_F(TrainedRun, InferRejectsUnreadableImage) {
  const auto dir = test::temp_dir("cli_infer_bad");
  std::ofstream(dir / "broken.png") << "not a png";
  const auto r = ldnet_cli("infer --checkpoint " + (run() / "checkpoint.ldn").string() + " --image " +
                           (dir / "broken.png").string() + " --out " + dir.string());
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.err.find("broken.png"), std::string::npos) << r.err;
}

// A hand-built network that passes the frame straight through the finest
// skip path and labels pixels brighter than 0.5 as lane.
TEST(CliEval, OracleCheckpointScoresPerfectly) {
  const auto dir = test::temp_dir("cli_eval_oracle");
  LdnetConfig config;
  config.base_width = 2;
  config.num_classes = 2;
  Ldnet<float> model(config);
  for (auto& p : model.parameters()) {
    auto v = p.tensor.mutable_values();
    const bool running_var = p.name.ends_with("running_var") || p.name.ends_with(".scale");
    const bool seen = p.name.ends_with("batches_seen");
    std::fill(v.begin(), v.end(), running_var || seen ? 1.0f : 0.0f);
  }
  auto& params = model.params();
  params.encoder[0].conv1.weight.at(0, 0, 1, 1) = 1.0f;
  params.encoder[0].conv2.weight.at(0, 0, 1, 1) = 1.0f;
  params.decoder[2].gate.b_psi.mutable_values()[0] = 20.0f;  // alpha ~ 1
  params.decoder[2].stack.conv1.weight.at(0, 0, 1, 1) = 1.0f;  // gated skip, channel 0
  params.decoder[2].stack.conv2.weight.at(0, 0, 1, 1) = 1.0f;
  params.classifier.weight.at(1, 0, 0, 0) = 2.0f;
  params.classifier.bias.mutable_values()[1] = -1.0f;
  save_params(model, dir / "oracle.ldn");

  std::mt19937_64 rng(5);
  const float levels[] = {0.0f, 0.2f, 0.8f, 1.0f};
  for (int i = 0; i < 3; ++i) {
    SegmentationSample s;
    s.id = "s" + std::to_string(i);
    s.height = s.width = 32;
    for (std::size_t k = 0; k < 32 * 32; ++k) {
      const float f = levels[rng() % 4];
      s.frame.push_back(f);
      s.label.push_back(f > 0.5f);
    }
    save_sample(dir / "data", s);
  }
  const auto r = ldnet_cli("eval --checkpoint " + (dir / "oracle.ldn").string() + " --data " +
                           (dir / "data").string() + " --out " + (dir / "report.json").string());
  ASSERT_EQ(r.code, 0) << r.err;
  const auto json = slurp(dir / "report.json");
  EXPECT_NE(json.find("\"lane_classes\": {\n    \"class_set\": \"lane_classes\""), std::string::npos) << json;
  std::size_t hits = 0;
  for (std::size_t pos = 0; (pos = json.find("\"mean_F1\": 100.0", pos)) != std::string::npos; ++pos) ++hits;
  EXPECT_EQ(hits, 2u) << json;
}

TEST(CliGradcheck, OpsPassAtDefaultTolerance) {
  const auto r = ldnet_cli("gradcheck --skip-model");
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("conv2d"), std::string::npos);
  EXPECT_NE(r.out.find("softmax_cross_entropy"), std::string::npos);
}

TEST(CliGradcheck, UnattainableToleranceFails) {
  const auto r = ldnet_cli("gradcheck --skip-model --tolerance 1e-12");
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.err.find("error: gradcheck failed for"), std::string::npos) << r.err;
}

TEST(CliGradcheck, SabotagedBackwardIsNamed) {
  const auto r = ldnet_cli("gradcheck --skip-model --sabotage upsample2x");
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.err.find("error: gradcheck failed for upsample2x"), std::string::npos) << r.err;
  // Only the corrupted rule and composites built on it fail.
  EXPECT_EQ(r.err.find("failed for conv2d"), std::string::npos) << r.err;
}

TEST(CliGradcheck, BadArgumentsAreValidationErrors) {
  EXPECT_EQ(ldnet_cli("gradcheck --size 30").code, 1);
  EXPECT_EQ(ldnet_cli("gradcheck --sabotage nonsense").code, 1);
  EXPECT_EQ(ldnet_cli("frobnicate").code, 1);
}

}  // namespace
}  // namespace ldnet
