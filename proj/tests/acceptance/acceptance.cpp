// Acceptance harness: one PASS/FAIL line per criterion, nonzero exit if any fails.
#include <sys/wait.h>

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "ldnet/checkpoint.hpp"
#include "ldnet/data.hpp"
#include "ldnet/layers.hpp"
#include "ldnet/metrics.hpp"
#include "ldnet/training.hpp"
#include "test_support.hpp"

namespace fs = std::filesystem;
using namespace ldnet;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---------------------------------------------------------------------------

Outcome gradient_correctness() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto log = fs::temp_directory_path() / "ldnet_acceptance_gradcheck.txt";
  const std::string cmd = std::string(LDNET_CLI_PATH) + " gradcheck --size 32 --tolerance 1e-4 --model-tolerance 1e-3 >" +
                          log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  const double elapsed = seconds_since(t0);
  std::ifstream in(log);
  std::string line, model_line;
  int rows = 0;
  double worst_op = 0;
  while (std::getline(in, line)) {
    // Result rows: name, error, tolerance, coordinates, status.
    std::istringstream ls(line);
    std::string name, status;
    double err = 0, tol = 0;
    std::size_t coords = 0;
    if (!(ls >> name >> err >> tol >> coords >> status) || (status != "ok" && status != "FAIL")) continue;
    ++rows;
    if (name == "model") model_line = line;
    else worst_op = std::max(worst_op, err);
  }
  const bool ok = WIFEXITED(status) && WEXITSTATUS(status) == 0 && !model_line.empty() && elapsed < 300;
  std::istringstream ms(model_line);
  std::string name;
  double model_err = -1;
  ms >> name >> model_err;
  return {ok, fmt("%d rows, worst op %.2e (< 1e-4), model %.2e (< 1e-3), %.0f s (< 300 s)", rows, worst_op, model_err,
                  elapsed)};
}

Outcome atrous_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0;
  for (int rate : {1, 2, 4, 8, 16, 32}) {
    auto x = test::random_tensor({1, 2, 70, 70}, 100 + rate);
    auto w = test::random_tensor({3, 2, 3, 3}, 200 + rate);
    auto b = test::random_tensor({3}, 300 + rate);
    const auto dilated = conv2d(x, w, b, {1, same_padding(3, rate), rate});
    const auto dense = test::zero_insert(w, rate);
    const int pad = static_cast<int>(dense.dim(2) - 1) / 2;
    // Zero-inserted dense kernel through an independent loop nest.
    const auto oracle = test::reference_conv(x, dense, &b, 1, pad, 1);
    if (dilated.numel() != oracle.size()) return {false, fmt("rate %d: shape mismatch", rate)};
    worst = std::max(worst, test::max_abs_diff(dilated.values(), oracle));
  }
  const double elapsed = seconds_since(t0);
  return {worst < 1e-10 && elapsed < 10, fmt("max abs diff %.2e over rates 1..32 (< 1e-10), %.2f s", worst, elapsed)};
}

Outcome dropblock_statistics() {
  const auto t0 = std::chrono::steady_clock::now();
  const int bs = 5, feat = 32, masks = 10000;
  const double gamma = dropblock_gamma(0.9, bs, feat);
  std::uint64_t dropped = 0;
  for (int m = 0; m < masks; ++m) {
    const auto mask = dropblock_mask(1, feat, feat, bs, gamma, static_cast<std::uint64_t>(m));
    for (auto v : mask) dropped += v == 0;
  }
  const double fraction = static_cast<double>(dropped) / (static_cast<double>(masks) * feat * feat);

  auto x = test::random_tensor({2, 3, feat, feat}, 9);
  const auto y = dropblock_apply(DropBlockConfig{bs, 0.9, Mode::kEval, 1}, x);
  bool identity = y.shape() == x.shape();
  for (std::size_t i = 0; identity && i < x.numel(); ++i) {
    identity = std::bit_cast<std::uint64_t>(x.values()[i]) == std::bit_cast<std::uint64_t>(y.values()[i]);
  }
  const double elapsed = seconds_since(t0);
  return {fraction >= 0.08 && fraction <= 0.12 && identity && elapsed < 30,
          fmt("dropped fraction %.4f in [0.08, 0.12], eval identity %s, %.1f s", fraction, identity ? "bit-exact" : "BROKEN",
              elapsed)};
}

// Correctly rounded double of num/den, the only admissible value for an exact ratio.
double ratio(std::uint64_t num, std::uint64_t den) {
  return den ? static_cast<double>(num) / static_cast<double>(den) : 0.0;
}

Outcome metric_identities() {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<std::uint64_t> count(0, 100000);
  int rational_ok = 0, rounded_ok = 0, within_4ulp = 0, bitwise_equal = 0;
  for (int i = 0; i < 1000; ++i) {
    ConfusionCounts::Tally t{count(rng) + 1, count(rng), count(rng), count(rng)};
    // F1 = 2tp/(2tp+fp+fn); F1/(2-F1) = 2tp/(2(2tp+fp+fn) - 2tp) must reduce to tp/(tp+fp+fn).
    const std::uint64_t fn = 2 * t.tp, fd = 2 * t.tp + t.fp + t.fn;
    const std::uint64_t qn = fn, qd = 2 * fd - fn;
    rational_ok += qn * (t.tp + t.fp + t.fn) == t.tp * qd;
    const double f1 = f1_score(t), iou = iou_score(t);
    rounded_ok += f1 == ratio(fn, fd) && iou == ratio(t.tp, t.tp + t.fp + t.fn);
    const double derived = f1 / (2.0 - f1);
    bitwise_equal += derived == iou;
    within_4ulp += std::abs(derived - iou) <= 4 * (std::nextafter(iou, 2.0) - iou);
  }

  // Brute force: per-pixel one-vs-rest tallies on 100 random 16x16 multiclass pairs.
  int mask_ok = 0;
  for (int pair = 0; pair < 100; ++pair) {
    const std::size_t classes = 2 + pair % 4;
    std::vector<std::uint8_t> pred(256), gt(256);
    for (auto& v : pred) v = static_cast<std::uint8_t>(rng() % classes);
    for (auto& v : gt) v = static_cast<std::uint8_t>(rng() % classes);
    ConfusionCounts counts(classes);
    counts.accumulate(pred, gt);
    bool ok = true;
    for (std::size_t c = 0; c < classes; ++c) {
      std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
      for (std::size_t i = 0; i < 256; ++i) {
        const bool p = pred[i] == c, g = gt[i] == c;
        tp += p && g;
        fp += p && !g;
        fn += !p && g;
        tn += !p && !g;
      }
      const auto& t = counts[c];
      ok = ok && t.tp == tp && t.fp == fp && t.fn == fn && t.tn == tn;
      ok = ok && precision(t) == ratio(tp, tp + fp) && recall(t) == ratio(tp, tp + fn);
      ok = ok && f1_score(t) == (tp ? ratio(2 * tp, 2 * tp + fp + fn) : 0.0) && iou_score(t) == ratio(tp, tp + fp + fn);
    }
    mask_ok += ok;
  }
  const bool pass = rational_ok == 1000 && rounded_ok == 1000 && within_4ulp == 1000 && mask_ok == 100;
  return {pass, fmt("identity exact in rationals %d/1000, correctly rounded %d/1000, double F1/(2-F1) within 4 ulp "
                    "%d/1000 (bit-equal %d); brute-force masks %d/100",
                    rational_ok, rounded_ok, within_4ulp, bitwise_equal, mask_ok)};
}

Outcome schedule_endpoints() {
  const TrainConfig c;
  const double lr0 = poly_lr(0, c), lr100 = poly_lr(100, c), lr50 = poly_lr(50, c);
  const double kp0 = kp_schedule(0, c), kp100 = kp_schedule(100, c);
  const bool pass = lr0 == 5e-4 && lr100 == 0.0 && std::abs(lr50 - 2.6795e-4) <= 1e-8 && kp0 == 0.0 && kp100 == 0.5;
  return {pass, fmt("lr(0)=%.17g lr(100)=%.17g lr(50)=%.8e kP(0)=%.17g kP(100)=%.17g", lr0, lr100, lr50, kp0, kp100)};
}

struct OverfitResult {
  double f1 = 0, iou = 0, seconds = 0;
};

OverfitResult overfit(std::size_t classes, int min_lanes) {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<SegmentationSample> data;
  for (std::uint64_t s = 0; s < 16; ++s) data.push_back(synth_scene(s, {64, classes, min_lanes, 4}));
  LdnetConfig mc;
  mc.base_width = 8;
  mc.num_classes = classes;
  // Initialization and run seeds stay at their defaults (0).
  TrainConfig tc;
  tc.max_epochs = 60;
  tc.initial_lr = 5e-3;
  tc.kp_inverted = true;
  Ldnet<float> model(mc);
  Trainer<float> trainer(model, tc);
  for (int e = 0; e < tc.max_epochs; ++e) trainer.train_epoch(data, e);
  const auto report = mean_report(evaluate(model, data), ClassSet::kLaneClasses);
  return {report.mean_f1, report.mean_iou, seconds_since(t0)};
}

Outcome end_to_end_overfit() {
  const auto binary = overfit(2, 1);
  const auto multi = overfit(5, 4);
  const bool pass = binary.f1 >= 0.90 && binary.iou >= 0.80 && multi.f1 >= 0.75 &&
                    binary.seconds + multi.seconds < 1200;
  return {pass, fmt("binary F1 %.4f (>= 0.90) IoU %.4f (>= 0.80) in %.0f s; multiclass mean lane F1 %.4f (>= 0.75) "
                    "in %.0f s",
                    binary.f1, binary.iou, binary.seconds, multi.f1, multi.seconds)};
}

Outcome determinism_and_resume() {
  std::vector<SegmentationSample> data;
  for (std::uint64_t s = 0; s < 8; ++s) data.push_back(synth_scene(50 + s, {32, 2, 1, 4}));
  LdnetConfig mc;
  mc.base_width = 4;
  mc.num_classes = 2;
  mc.init_seed = 7;
  TrainConfig tc;
  tc.max_epochs = 10;
  tc.seed = 7;

  auto curve = [&](int epochs) {
    Ldnet<float> model(mc);
    Trainer<float> trainer(model, tc);
    std::vector<double> losses;
    for (int e = 0; e < epochs; ++e) losses.push_back(trainer.train_epoch(data, e));
    return losses;
  };
  const auto a = curve(10), b = curve(10);
  const bool identical = a == b;

  const auto path = fs::temp_directory_path() / "ldnet_acceptance_resume.ldn";
  {
    Ldnet<float> model(mc);
    Trainer<float> trainer(model, tc);
    for (int e = 0; e < 5; ++e) trainer.train_epoch(data, e);
    trainer.save(path, 5);
  }
  Ldnet<float> model(mc);
  Trainer<float> trainer(model, tc);
  double resumed = 0;
  for (int e = trainer.resume(path); e < 10; ++e) resumed = trainer.train_epoch(data, e);
  const double diff = std::abs(resumed - a.back());
  return {identical && diff < 1e-6,
          fmt("repeat curves %s; 5+resume+5 final loss %.9g vs 10 epochs %.9g, |diff| %.2e (< 1e-6)",
              identical ? "identical" : "DIFFER", resumed, a.back(), diff)};
}

// Trains a multiclass and a binary (lane vs background) model on a dataset in
// the standard layout, then writes both reports and checks their format and
// the per-class ordering F1 >= IoU.
Outcome det_reports(const fs::path& root, std::size_t width, int epochs, std::size_t image_size, const fs::path& out) {
  auto samples = load_dataset(root, 5);
  for (auto& s : samples) s = resize_sample(s, image_size);
  const auto splits = split_dataset(samples, {});
  bool pass = !splits.train.empty() && !splits.test.empty();
  std::string detail;
  for (std::size_t classes : {5u, 2u}) {
    auto collapse = [&](std::vector<SegmentationSample> v) {
      if (classes == 2)
        for (auto& s : v)
          for (auto& l : s.label) l = l != 0;
      return v;
    };
    const auto train = collapse(splits.train), test = collapse(splits.test);
    LdnetConfig mc;
    mc.base_width = width;
    mc.num_classes = classes;
    TrainConfig tc;
    tc.max_epochs = epochs;
    Ldnet<float> model(mc);
    Trainer<float> trainer(model, tc);
    for (int e = 0; e < epochs; ++e) trainer.train_epoch(train, e);
    const auto counts = evaluate(model, test);
    const auto json_text = reports_json(counts);
    const auto name = classes == 5 ? "multiclass" : "binary";
    std::ofstream(out / (std::string(name) + "_report.json")) << json_text << '\n';

    const auto j = nlohmann::json::parse(json_text);
    for (const char* set : {"lane_classes", "all_classes"}) {
      const auto& r = j.at(set);
      const std::size_t expected = std::string(set) == "lane_classes" ? classes - 1 : classes;
      pass = pass && r.at("per_class").size() == expected && r.contains("mean_F1") && r.contains("mean_IoU");
      for (const auto& [cls, m] : r.at("per_class").items()) {
        for (const char* key : {"P", "R", "F1", "IoU", "TP", "FP", "FN"}) pass = pass && m.contains(key);
        pass = pass && m.at("F1").get<double>() >= m.at("IoU").get<double>();
      }
      pass = pass && r.at("mean_F1").get<double>() >= r.at("mean_IoU").get<double>();
    }
    detail += fmt("%s mean lane F1 %.2f IoU %.2f; ", name, j["lane_classes"]["mean_F1"].get<double>(),
                  j["lane_classes"]["mean_IoU"].get<double>());
  }
  return {pass, detail + "reports in " + out.string()};
}

Outcome dataset_scale() {
  const auto out = fs::temp_directory_path() / "ldnet_acceptance_det";
  fs::remove_all(out);
  fs::create_directories(out);
  if (const char* root = std::getenv("LDNET_DET_ROOT")) {
    auto r = det_reports(root, 64, 100, 256, out);
    r.detail = "DET export at " + std::string(root) + ": " + r.detail;
    return r;
  }
  // No dataset supplied: the same harness on a small synthetic stand-in.
  const auto stand_in = out / "stand_in";
  for (std::uint64_t s = 0; s < 12; ++s) {
    auto sample = synth_scene(900 + s, {32, 5, 1, 4});
    sample.id = fmt("%04d", static_cast<int>(s));
    save_sample(stand_in, sample);
  }
  auto r = det_reports(stand_in, 2, 2, 32, out);
  r.detail = "LDNET_DET_ROOT unset, synthetic stand-in (format and ordering only): " + r.detail;
  return r;
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"gradient correctness", gradient_correctness},
      {"atrous oracle", atrous_oracle},
      {"dropblock statistics", dropblock_statistics},
      {"metric identities", metric_identities},
      {"schedule endpoints", schedule_endpoints},
      {"end-to-end overfit", end_to_end_overfit},
      {"determinism and resume", determinism_and_resume},
      {"dataset-scale report format", dataset_scale},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << i + 1 << " (" << criteria[i].first << "): " << o.detail
              << std::endl;
  }
  return failures ? 1 : 0;
}
