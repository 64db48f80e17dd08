#include <algorithm>
#include <array>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "ldnet/checkpoint.hpp"
#include "ldnet/data.hpp"
#include "ldnet/image_io.hpp"
#include "ldnet/metrics.hpp"
#include "ldnet/model.hpp"
#include "ldnet/random.hpp"
#include "ldnet/training.hpp"
#include "ldnet/verify.hpp"
#include "run_config.hpp"

namespace fs = std::filesystem;

namespace ldnet::cli {
namespace {

constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

// Bad user input: arguments, config values, incompatible data.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// RGBA per class; class 0 stays fully transparent.
constexpr std::array<std::array<std::uint8_t, 4>, 5> kOverlayPalette{{
    {0, 0, 0, 0},
    {255, 0, 0, 255},
    {0, 255, 0, 255},
    {0, 0, 255, 255},
    {255, 255, 0, 255},
}};

int report_errors(const std::vector<std::string>& errors) {
  for (const auto& e : errors) std::cerr << "error: " << e << '\n';
  return kExitValidation;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw std::runtime_error("short write to '" + path.string() + "'");
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string stem_for(std::size_t index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04zu", index);
  return buf;
}

std::vector<SegmentationSample> load_prepared(const fs::path& root, std::size_t classes, std::size_t channels,
                                              std::size_t image_size) {
  if (!fs::is_directory(root)) throw ValidationError("data: '" + root.string() + "' is not a directory");
  auto samples = load_dataset(root, classes, channels);
  if (image_size != 0) {
    for (auto& s : samples) s = resize_sample(s, image_size);
  }
  return samples;
}

// Config file (if any) first, then explicit overrides, then parsing and
// validation with every problem collected.
std::optional<RunConfig> resolve_config(const std::string& config_path, const KeyValues& overrides,
                                        std::vector<std::string>& errors) {
  KeyValues kv;
  if (!config_path.empty()) {
    try {
      kv = read_key_values_file(config_path);
    } catch (const std::exception& e) {
      errors.push_back(std::string("config: ") + e.what());
      return std::nullopt;
    }
  }
  for (const auto& [k, v] : overrides) kv[k] = v;
  auto config = RunConfig::from_key_values(kv, errors);
  for (auto& e : config.validate()) errors.push_back(std::move(e));
  return config;
}

// ---------------------------------------------------------------------------
// synth

struct SynthArgs {
  std::string out;
  std::size_t count = 12;
  std::size_t classes = 2;
  std::uint64_t seed = 0;
  std::size_t size = 256;
  int min_lanes = 1;
  int max_lanes = 4;
};

int cmd_synth(const SynthArgs& a) {
  std::vector<std::string> errors;
  if (a.classes != 2 && a.classes != 5) errors.push_back("classes: expected 2 or 5, got " + std::to_string(a.classes));
  if (a.size < 16 || a.size % 8 != 0) errors.push_back("size: must be a multiple of 8, at least 16");
  if (a.min_lanes < 1 || a.max_lanes > 4 || a.min_lanes > a.max_lanes) {
    errors.push_back("lanes: need 1 <= min-lanes <= max-lanes <= 4");
  }
  if (!errors.empty()) return report_errors(errors);

  const fs::path root(a.out);
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec || !fs::is_directory(root)) throw std::runtime_error("cannot create output directory '" + a.out + "'");

  SynthOptions options{a.size, a.classes, a.min_lanes, a.max_lanes};
  nlohmann::ordered_json manifest;
  manifest["count"] = a.count;
  manifest["classes"] = a.classes;
  manifest["size"] = a.size;
  manifest["seed"] = a.seed;
  manifest["min_lanes"] = a.min_lanes;
  manifest["max_lanes"] = a.max_lanes;
  manifest["samples"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < a.count; ++i) {
    auto sample = synth_scene(derive_seed(a.seed, {i}), options);
    sample.id = stem_for(i);
    save_sample(root, sample);
    manifest["samples"].push_back(sample.id);
  }
  write_text(root / "manifest.json", manifest.dump(2) + "\n");
  std::cout << "wrote " << a.count << " samples to " << root.string() << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// train

constexpr const char* kCheckpointName = "checkpoint.ldn";
constexpr const char* kLogName = "train_log.csv";
constexpr const char* kLogColumns = "epoch,lr,keep_prob,loss,val_f1,val_iou";

// Keeps the timestamp header and the rows of epochs already covered by the
// checkpoint, so a resumed run continues the same log.
void start_log(const fs::path& path, int completed_epochs) {
  std::vector<std::string> kept;
  if (completed_epochs > 0) {
    std::ifstream in(path);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty() || line[0] == '#' || line == kLogColumns) continue;
      if (std::stoi(line.substr(0, line.find(','))) < completed_epochs) kept.push_back(line);
    }
  }
  std::ostringstream os;
  os << "# started " << utc_timestamp() << '\n' << kLogColumns << '\n';
  for (const auto& l : kept) os << l << '\n';
  write_text(path, os.str());
}

template <typename T>
int run_training(const RunConfig& rc, bool resume, int stop_after) {
  const fs::path out(rc.out);
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec || !fs::is_directory(out)) throw std::runtime_error("cannot create output directory '" + rc.out + "'");
  write_text(out / "config.txt", rc.to_text());

  auto splits = split_dataset(load_prepared(rc.data, rc.model.num_classes, rc.model.in_channels, rc.image_size),
                              rc.split);
  if (rc.train.max_epochs > 0 && splits.train.empty()) {
    throw ValidationError("data: the training split is empty; add samples or raise split_train");
  }
  std::cout << "samples: train " << splits.train.size() << ", val " << splits.val.size() << ", test "
            << splits.test.size() << '\n';

  Ldnet<T> model(rc.model);
  Trainer<T> trainer(model, rc.train);
  const auto checkpoint = out / kCheckpointName;
  int start = 0;
  if (resume && fs::exists(checkpoint)) {
    start = trainer.resume(checkpoint);
    std::cout << "resumed after epoch " << start << '\n';
  }
  const auto log_path = out / kLogName;
  start_log(log_path, start);

  const int end = stop_after >= 0 ? std::min(stop_after, rc.train.max_epochs) : rc.train.max_epochs;
  for (int epoch = start; epoch < end; ++epoch) {
    const double loss = trainer.train_epoch(splits.train, epoch);
    std::string val_f1, val_iou;
    if (!splits.val.empty()) {
      const auto report = mean_report(evaluate(model, splits.val, rc.eval_batch_size));
      val_f1 = format_double(report.mean_f1);
      val_iou = format_double(report.mean_iou);
    }
    {
      std::ofstream log(log_path, std::ios::app);
      log << epoch << ',' << format_double(poly_lr(epoch, rc.train)) << ',' << format_double(model.keep_prob())
          << ',' << format_double(loss) << ',' << val_f1 << ',' << val_iou << '\n';
      if (!log) throw std::runtime_error("cannot append to '" + log_path.string() + "'");
    }
    trainer.save(checkpoint, epoch + 1);
    std::cout << "epoch " << epoch + 1 << "/" << rc.train.max_epochs << " loss " << format_double(loss)
              << (val_f1.empty() ? "" : " val_f1 " + val_f1) << '\n';
  }
  if (start >= rc.train.max_epochs && !fs::exists(checkpoint)) trainer.save(checkpoint, start);

  const auto json = reports_json(evaluate(model, splits.test, rc.eval_batch_size));
  write_text(out / "metrics_test.json", json + "\n");
  std::cout << json << '\n';
  return 0;
}

int cmd_train(const std::string& config_path, const KeyValues& overrides, bool resume, int stop_after) {
  std::vector<std::string> errors;
  auto rc = resolve_config(config_path, overrides, errors);
  if (rc) {
    if (rc->data.empty()) errors.push_back("data: required (--data or data= in the config)");
    if (rc->out.empty()) errors.push_back("out: required (--out or out= in the config)");
  }
  if (!errors.empty()) return report_errors(errors);
  return rc->train.precision == "double" ? run_training<double>(*rc, resume, stop_after)
                                             : run_training<float>(*rc, resume, stop_after);
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string split = "all";
  std::string config;
  std::string out;
  std::string dump_masks;
  std::optional<std::size_t> image_size;
  std::optional<std::size_t> classes;
};

Ldnet<float> load_model(const fs::path& path) {
  if (!fs::exists(path)) throw ValidationError("checkpoint: '" + path.string() + "' does not exist");
  const auto file = read_checkpoint(path);
  Ldnet<float> model(read_checkpoint_config(file));
  assign_entries(file.params, model.parameters());
  return model;
}

// Declared class count of a dataset: its manifest if present, else the
// largest label value plus one.
std::size_t dataset_classes(const fs::path& root, const std::vector<SegmentationSample>& samples) {
  if (fs::exists(root / "manifest.json")) {
    std::ifstream in(root / "manifest.json");
    const auto manifest = nlohmann::json::parse(in, nullptr, false);
    if (!manifest.is_discarded() && manifest.contains("classes")) return manifest["classes"].get<std::size_t>();
  }
  std::uint8_t top = 0;
  for (const auto& s : samples)
    for (auto v : s.label) top = std::max(top, v);
  return static_cast<std::size_t>(top) + 1;
}

int cmd_eval(const EvalArgs& a) {
  std::vector<std::string> errors;
  RunConfig rc;
  rc.image_size = 0;
  if (!a.config.empty()) {
    auto resolved = resolve_config(a.config, {}, errors);
    if (resolved) rc = *resolved;
  }
  if (a.image_size) rc.image_size = *a.image_size;
  if (rc.image_size % 8 != 0) errors.push_back("image-size: must be a multiple of 8 (or 0)");
  if (a.split != "all" && a.split != "train" && a.split != "val" && a.split != "test") {
    errors.push_back("split: expected all|train|val|test, got '" + a.split + "'");
  }
  if (!errors.empty()) return report_errors(errors);

  auto model = load_model(a.checkpoint);
  const std::size_t classes = model.config().num_classes;
  if (a.classes && *a.classes != classes) {
    throw ValidationError("class-count mismatch: --classes " + std::to_string(*a.classes) + " but the checkpoint has " +
                          std::to_string(classes));
  }
  auto samples = load_prepared(a.data, 256, model.config().in_channels, rc.image_size);
  if (const auto data_classes = dataset_classes(a.data, samples); data_classes != classes) {
    throw ValidationError("class-count mismatch: dataset has " + std::to_string(data_classes) +
                          " classes, checkpoint " + std::to_string(classes));
  }
  std::vector<SegmentationSample> chosen;
  if (a.split == "all") {
    chosen = std::move(samples);
  } else {
    auto splits = split_dataset(std::move(samples), rc.split);
    chosen = a.split == "train" ? std::move(splits.train) : a.split == "val" ? std::move(splits.val)
                                                                            : std::move(splits.test);
  }

  if (!a.dump_masks.empty()) fs::create_directories(a.dump_masks);
  const Predictor predict = [&](const SegmentationSample& s) {
    auto mask = predict_mask(model, s);
    if (!a.dump_masks.empty()) write_png(fs::path(a.dump_masks) / (s.id + ".png"), Image8{s.width, s.height, 1, mask});
    return mask;
  };
  const auto json = reports_json(evaluate(predict, chosen, classes));
  const fs::path out = a.out.empty() ? fs::path(a.checkpoint).parent_path() / ("eval_" + a.split + ".json")
                                     : fs::path(a.out);
  write_text(out, json + "\n");
  std::cout << json << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// infer

struct InferArgs {
  std::string checkpoint;
  std::string image;
  std::string out;
  std::size_t size = 0;
};

int cmd_infer(const InferArgs& a) {
  if (a.size % 8 != 0) return report_errors({"size: must be a multiple of 8 (or 0)"});
  auto model = load_model(a.checkpoint);
  const std::size_t channels = model.config().in_channels;

  const fs::path image_path(a.image);
  const Image8 img = read_png(image_path, channels);
  SegmentationSample sample;
  sample.id = image_path.stem().string();
  sample.height = img.height;
  sample.width = img.width;
  sample.channels = channels;
  sample.frame.resize(img.pixels.size());
  const std::size_t plane = img.height * img.width;
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t c = 0; c < channels; ++c) sample.frame[c * plane + i] = img.pixels[i * channels + c] / 255.0f;
  sample.label.assign(plane, 0);

  std::size_t target = a.size;
  if (target == 0 && (img.height != img.width || img.height % 8 != 0)) target = 256;
  if (target != 0) sample = resize_sample(sample, target);

  const auto mask = predict_mask(model, sample);
  Image8 overlay{sample.width, sample.height, 4, std::vector<std::uint8_t>(mask.size() * 4)};
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const auto& rgba = kOverlayPalette[mask[i] < kOverlayPalette.size() ? mask[i] : kOverlayPalette.size() - 1];
    std::copy(rgba.begin(), rgba.end(), overlay.pixels.begin() + static_cast<std::ptrdiff_t>(i * 4));
  }
  const fs::path out(a.out);
  fs::create_directories(out);
  write_png(out / (sample.id + "_mask.png"), Image8{sample.width, sample.height, 1, mask});
  write_png(out / (sample.id + "_overlay.png"), overlay);
  std::cout << "wrote " << (out / (sample.id + "_mask.png")).string() << " and "
            << (out / (sample.id + "_overlay.png")).string() << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradcheckArgs {
  std::size_t size = 32;
  double tolerance = 1e-4;
  double model_tolerance = 1e-3;
  std::size_t width = 2;
  std::size_t classes = 5;
  std::size_t model_coordinates = 0;
  bool skip_model = false;
  std::uint64_t seed = 0;
  std::string sabotage;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  std::vector<std::string> errors;
  if (a.size < 8 || a.size % 8 != 0) errors.push_back("size: must be a positive multiple of 8");
  if (!(a.tolerance > 0) || !(a.model_tolerance > 0)) errors.push_back("tolerance: must be positive");
  if (a.width < 1) errors.push_back("width: must be >= 1");
  if (a.classes < 2) errors.push_back("classes: must be >= 2");
  std::optional<OpKind> sabotage;
  if (!a.sabotage.empty()) {
    for (int k = 0; k <= static_cast<int>(OpKind::kSoftmaxCrossEntropy); ++k) {
      if (op_name(static_cast<OpKind>(k)) == a.sabotage) sabotage = static_cast<OpKind>(k);
    }
    if (!sabotage) errors.push_back("sabotage: unknown op '" + a.sabotage + "'");
  }
  if (!errors.empty()) return report_errors(errors);

  GradientSuiteOptions options;
  options.op_tolerance = a.tolerance;
  options.model_tolerance = a.model_tolerance;
  options.model_size = a.size;
  options.model_width = a.width;
  options.model_classes = a.classes;
  options.model_coordinates_per_tensor = a.model_coordinates;
  options.include_model = !a.skip_model;
  options.seed = a.seed;

  std::printf("%-24s %12s %10s %10s  %s\n", "op", "max_rel_err", "tolerance", "coords", "status");
  std::fflush(stdout);
  fault_injection::break_backward(sabotage);
  const auto rows = run_gradient_suite(options, [](const GradientSuiteRow& r) {
    std::printf("%-24s %12.3e %10.1e %10zu  %s\n", r.name.c_str(), r.result.max_relative_error, r.tolerance,
                r.result.coordinates_checked, r.passed() ? "ok" : "FAIL");
    std::fflush(stdout);
  });
  fault_injection::break_backward(std::nullopt);

  int failures = 0;
  for (const auto& r : rows) {
    if (r.passed()) continue;
    ++failures;
    char buf[512];
    std::snprintf(buf, sizeof buf,
                  "error: gradcheck failed for %s: relative error %.3e >= %.1e at %s[%zu] (analytic %.9e, numeric "
                  "%.9e)",
                  r.name.c_str(), r.result.max_relative_error, r.tolerance, r.result.worst_tensor.c_str(),
                  r.result.worst_index, r.result.analytic, r.result.numeric);
    std::cerr << buf << '\n';
  }
  if (failures) return kExitRuntime;
  std::cout << "all " << rows.size() << " checks passed\n";
  return 0;
}

// ---------------------------------------------------------------------------

int run(int argc, char** argv) {
  CLI::App app{"Event-camera lane segmentation toolkit"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic event-frame dataset");
  synth_cmd->add_option("--out", synth.out, "Output dataset directory")->required();
  synth_cmd->add_option("--count", synth.count, "Number of samples")->capture_default_str();
  synth_cmd->add_option("--classes", synth.classes, "2 (binary) or 5 (four lane classes)")->capture_default_str();
  synth_cmd->add_option("--seed", synth.seed, "Generator seed")->capture_default_str();
  synth_cmd->add_option("--size", synth.size, "Frame side length in pixels")->capture_default_str();
  synth_cmd->add_option("--min-lanes", synth.min_lanes)->capture_default_str();
  synth_cmd->add_option("--max-lanes", synth.max_lanes)->capture_default_str();

  std::string train_config;
  std::vector<std::string> train_sets;
  bool train_resume = false;
  int train_stop_after = -1;
  std::map<std::string, std::string> train_flags;
  auto* train_cmd = app.add_subcommand("train", "Train a model and report test-split metrics");
  train_cmd->add_option("--config", train_config, "key=value config file");
  train_cmd->add_option("--set", train_sets, "Override any config key: --set key=value (repeatable)");
  train_cmd->add_flag("--resume", train_resume, "Continue from <out>/checkpoint.ldn if present");
  train_cmd->add_option("--stop-after", train_stop_after,
                        "Exit once this many epochs are complete, leaving the schedule unchanged");
  const std::vector<std::pair<std::string, std::string>> train_flag_keys{
      {"--data", "data"},          {"--out", "out"},           {"--max-epochs", "max_epochs"},
      {"--lr", "initial_lr"},      {"--batch-size", "batch_size"}, {"--base-width", "base_width"},
      {"--classes", "num_classes"}, {"--seed", "seed"},        {"--image-size", "image_size"},
      {"--precision", "precision"}};
  for (const auto& [flag, key] : train_flag_keys) {
    train_cmd->add_option(flag, train_flags[key], "Sets " + key);
  }

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  eval_cmd->add_option("--checkpoint", eval.checkpoint)->required();
  eval_cmd->add_option("--data", eval.data)->required();
  eval_cmd->add_option("--split", eval.split, "all|train|val|test")->capture_default_str();
  eval_cmd->add_option("--config", eval.config, "Run config supplying split fractions, seed and image size");
  eval_cmd->add_option("--out", eval.out, "Report path (default: next to the checkpoint)");
  eval_cmd->add_option("--dump-masks", eval.dump_masks, "Write predicted masks here");
  eval_cmd->add_option("--image-size", eval.image_size, "Resize samples (0 keeps stored size)");
  eval_cmd->add_option("--classes", eval.classes, "Expected class count");

  InferArgs infer;
  auto* infer_cmd = app.add_subcommand("infer", "Predict a mask and color overlay for one image");
  infer_cmd->add_option("--checkpoint", infer.checkpoint)->required();
  infer_cmd->add_option("--image", infer.image)->required();
  infer_cmd->add_option("--out", infer.out, "Output directory")->required();
  infer_cmd->add_option("--size", infer.size, "Resize to size x size (0: keep valid square inputs)");

  GradcheckArgs gc;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every backward rule");
  gc_cmd->add_option("--size", gc.size, "Model input side length")->capture_default_str();
  gc_cmd->add_option("--tolerance", gc.tolerance, "Per-op relative error bound")->capture_default_str();
  gc_cmd->add_option("--model-tolerance", gc.model_tolerance, "Full-model bound")->capture_default_str();
  gc_cmd->add_option("--width", gc.width, "Model base width")->capture_default_str();
  gc_cmd->add_option("--classes", gc.classes, "Model class count")->capture_default_str();
  gc_cmd->add_option("--model-coordinates", gc.model_coordinates, "Sample per tensor (0: all)")->capture_default_str();
  gc_cmd->add_flag("--skip-model", gc.skip_model, "Only ops and layers");
  gc_cmd->add_option("--seed", gc.seed)->capture_default_str();
  gc_cmd->add_option("--sabotage", gc.sabotage)->group("");  // corrupts one backward rule

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  }

  if (*synth_cmd) return cmd_synth(synth);
  if (*train_cmd) {
    KeyValues overrides;
    std::vector<std::string> errors;
    for (const auto& s : train_sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos || eq == 0) {
        errors.push_back("--set: expected key=value, got '" + s + "'");
        continue;
      }
      overrides[s.substr(0, eq)] = s.substr(eq + 1);
    }
    if (!errors.empty()) return report_errors(errors);
    for (const auto& [flag, key] : train_flag_keys) {
      if (train_cmd->count(flag)) overrides[key] = train_flags[key];
    }
    return cmd_train(train_config, overrides, train_resume, train_stop_after);
  }
  if (*eval_cmd) return cmd_eval(eval);
  if (*infer_cmd) return cmd_infer(infer);
  return cmd_gradcheck(gc);
}

}  // namespace
}  // namespace ldnet::cli

int main(int argc, char** argv) {
  try {
    return ldnet::cli::run(argc, argv);
  } catch (const ldnet::cli::ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return ldnet::cli::kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return ldnet::cli::kExitRuntime;
  }
}
