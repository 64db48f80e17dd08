#include "ldnet/data.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <stdexcept>

#include "ldnet/image_io.hpp"

namespace ldnet {

namespace fs = std::filesystem;

namespace {

std::map<std::string, fs::path> png_files(const fs::path& dir) {
  std::map<std::string, fs::path> out;
  if (!fs::exists(dir)) return out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".png") out[entry.path().stem().string()] = entry.path();
  }
  return out;
}

}  // namespace

std::vector<SegmentationSample> load_dataset(const fs::path& root, std::size_t num_classes, std::size_t in_channels) {
  if (!fs::is_directory(root)) throw std::runtime_error("dataset root '" + root.string() + "' is not a directory");
  if (in_channels != 1 && in_channels != 3) throw std::invalid_argument("load_dataset: in_channels must be 1 or 3");
  const auto images = png_files(root / "images");
  const auto labels = png_files(root / "labels");
  for (const auto& [stem, path] : labels) {
    if (!images.count(stem)) throw std::runtime_error("label '" + path.string() + "' has no matching image");
  }
  std::vector<SegmentationSample> out;
  for (const auto& [stem, image_path] : images) {
    const auto label_it = labels.find(stem);
    if (label_it == labels.end()) throw std::runtime_error("image '" + image_path.string() + "' has no matching label");
    const auto img = read_png(image_path, in_channels);
    const auto lab = read_png(label_it->second, 1);
    if (img.width != lab.width || img.height != lab.height) {
      throw std::runtime_error("label '" + label_it->second.string() + "' is " + std::to_string(lab.width) + "x" +
                               std::to_string(lab.height) + " but its image is " + std::to_string(img.width) + "x" +
                               std::to_string(img.height));
    }
    for (auto v : lab.pixels) {
      if (v >= num_classes) {
        throw std::runtime_error("label '" + label_it->second.string() + "' contains value " + std::to_string(v) +
                                 " but num_classes is " + std::to_string(num_classes));
      }
    }
    SegmentationSample s;
    s.id = stem;
    s.height = img.height;
    s.width = img.width;
    s.channels = in_channels;
    s.frame.resize(in_channels * img.height * img.width);
    const std::size_t plane = img.height * img.width;
    for (std::size_t i = 0; i < plane; ++i) {
      for (std::size_t c = 0; c < in_channels; ++c) {
        s.frame[c * plane + i] = static_cast<float>(img.pixels[i * in_channels + c]) / 255.0f;
      }
    }
    s.label = lab.pixels;
    out.push_back(std::move(s));
  }
  return out;
}

void save_sample(const fs::path& root, const SegmentationSample& sample) {
  fs::create_directories(root / "images");
  fs::create_directories(root / "labels");
  Image8 img{sample.width, sample.height, sample.channels, {}};
  img.pixels.resize(sample.frame.size());
  const std::size_t plane = sample.height * sample.width;
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < sample.channels; ++c) {
      const float v = std::clamp(sample.frame[c * plane + i], 0.0f, 1.0f);
      img.pixels[i * sample.channels + c] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
  }
  write_png(root / "images" / (sample.id + ".png"), img);
  write_png(root / "labels" / (sample.id + ".png"), Image8{sample.width, sample.height, 1, sample.label});
}

SegmentationSample resize_sample(const SegmentationSample& sample, std::size_t target) {
  if (sample.height == target && sample.width == target) return sample;
  SegmentationSample out;
  out.id = sample.id;
  out.height = target;
  out.width = target;
  out.channels = sample.channels;
  out.frame.resize(sample.channels * target * target);
  out.label.resize(target * target);

  auto bilinear_taps = [](std::size_t in, std::size_t outn) {
    std::vector<std::pair<std::size_t, double>> taps(outn);
    const double scale = static_cast<double>(in) / static_cast<double>(outn);
    for (std::size_t o = 0; o < outn; ++o) {
      double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
      src = std::clamp(src, 0.0, static_cast<double>(in - 1));
      auto lo = static_cast<std::size_t>(src);
      if (lo >= in - 1) lo = in > 1 ? in - 2 : 0;
      taps[o] = {lo, in > 1 ? src - static_cast<double>(lo) : 0.0};
    }
    return taps;
  };
  auto nearest = [](std::size_t in, std::size_t outn) {
    std::vector<std::size_t> idx(outn);
    for (std::size_t o = 0; o < outn; ++o) {
      idx[o] = std::min(in - 1, static_cast<std::size_t>((static_cast<double>(o) + 0.5) * in / outn));
    }
    return idx;
  };

  const auto th = bilinear_taps(sample.height, target);
  const auto tw = bilinear_taps(sample.width, target);
  const std::size_t in_plane = sample.height * sample.width;
  for (std::size_t c = 0; c < sample.channels; ++c) {
    const float* src = sample.frame.data() + c * in_plane;
    float* dst = out.frame.data() + c * target * target;
    for (std::size_t y = 0; y < target; ++y) {
      const auto [y0, fy] = th[y];
      const std::size_t y1 = std::min(y0 + 1, sample.height - 1);
      for (std::size_t x = 0; x < target; ++x) {
        const auto [x0, fx] = tw[x];
        const std::size_t x1 = std::min(x0 + 1, sample.width - 1);
        const double top = src[y0 * sample.width + x0] * (1.0 - fx) + src[y0 * sample.width + x1] * fx;
        const double bot = src[y1 * sample.width + x0] * (1.0 - fx) + src[y1 * sample.width + x1] * fx;
        dst[y * target + x] = static_cast<float>(top * (1.0 - fy) + bot * fy);
      }
    }
  }
  const auto ny = nearest(sample.height, target);
  const auto nx = nearest(sample.width, target);
  for (std::size_t y = 0; y < target; ++y) {
    for (std::size_t x = 0; x < target; ++x) out.label[y * target + x] = sample.label[ny[y] * sample.width + nx[x]];
  }
  return out;
}

DatasetSplits split_dataset(std::vector<SegmentationSample> samples, const SplitSpec& spec) {
  if (spec.train < 0 || spec.val < 0 || spec.train + spec.val > 1.0 + 1e-9) {
    throw std::invalid_argument("split fractions must be non-negative and sum to at most 1");
  }
  std::mt19937_64 rng(spec.seed);
  std::shuffle(samples.begin(), samples.end(), rng);
  const std::size_t n = samples.size();
  const auto n_train = static_cast<std::size_t>(std::floor(spec.train * static_cast<double>(n) + 1e-9));
  const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::floor(spec.val * static_cast<double>(n) + 1e-9)));
  DatasetSplits out;
  auto first = std::make_move_iterator(samples.begin());
  out.train.assign(first, first + static_cast<std::ptrdiff_t>(n_train));
  out.val.assign(first + static_cast<std::ptrdiff_t>(n_train), first + static_cast<std::ptrdiff_t>(n_train + n_val));
  out.test.assign(first + static_cast<std::ptrdiff_t>(n_train + n_val), std::make_move_iterator(samples.end()));
  return out;
}

namespace {

constexpr float kPositive = 1.0f;
constexpr float kNegative = 153.0f / 255.0f;

struct Lane {
  double bottom_x;
  double width;
  bool dashed;
  int dash, gap, phase;
};

}  // namespace

SegmentationSample synth_scene(std::uint64_t seed, const SynthOptions& options) {
  if (options.num_classes != 2 && options.num_classes != 5) {
    throw std::invalid_argument("synth_scene: num_classes must be 2 or 5");
  }
  if (options.size < 16) throw std::invalid_argument("synth_scene: size must be at least 16");
  if (options.min_lanes < 1 || options.max_lanes > 4 || options.min_lanes > options.max_lanes) {
    throw std::invalid_argument("synth_scene: lane count range must lie within [1,4]");
  }
  const std::size_t n = options.size;
  const double s = static_cast<double>(n);
  std::mt19937_64 rng(seed);
  auto uniform = [&rng](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  auto uniform_int = [&rng](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };

  const int lane_count = uniform_int(options.min_lanes, options.max_lanes);
  const double vx = s * uniform(0.4, 0.6);
  const double vy = s * uniform(0.25, 0.35);
  const double bottom = s - 1.0;

  std::vector<Lane> lanes(static_cast<std::size_t>(lane_count));
  const double span = 0.9 * s / lane_count;
  for (int i = 0; i < lane_count; ++i) {
    auto& lane = lanes[static_cast<std::size_t>(i)];
    lane.bottom_x = 0.05 * s + span * (i + 0.5) + uniform(-0.15, 0.15) * span;
    lane.width = uniform(2.0, 6.0);
    lane.dashed = uniform(0.0, 1.0) < 0.5;
    lane.dash = uniform_int(static_cast<int>(std::max(6.0, s / 16)), static_cast<int>(std::max(8.0, s / 10)));
    lane.gap = uniform_int(2, 4);
    lane.phase = uniform_int(0, lane.dash + lane.gap - 1);
  }
  std::sort(lanes.begin(), lanes.end(), [](const Lane& a, const Lane& b) { return a.bottom_x < b.bottom_x; });

  // Stop short of the vanishing point so neighbouring strokes stay apart.
  double min_spacing = s;
  for (std::size_t i = 1; i < lanes.size(); ++i) min_spacing = std::min(min_spacing, lanes[i].bottom_x - lanes[i - 1].bottom_x);
  const double needed = 16.0 / min_spacing;  // fraction of the way back from the vanishing point
  const double top = std::min(vy + std::max(0.1, needed) * (bottom - vy), 0.7 * s);

  std::vector<std::uint8_t> label(n * n, 0);
  std::vector<std::uint8_t> visible(n * n, 0);
  for (std::size_t li = 0; li < lanes.size(); ++li) {
    const auto& lane = lanes[li];
    const auto cls = static_cast<std::uint8_t>(options.num_classes == 2 ? 1 : li + 1);
    // Centre line from (bottom_x, bottom) toward (vx, vy); perpendicular distance test.
    const double dx = vx - lane.bottom_x, dy = vy - bottom;
    const double len = std::hypot(dx, dy);
    const double ux = dx / len, uy = dy / len;
    const double half = lane.width / 2.0;
    // A dashed stroke begins and ends on a visible dash so that every labelled
    // row is near drawn edges.
    const int period = lane.dash + lane.gap;
    auto in_dash = [&](std::size_t y) {
      return !lane.dashed || (static_cast<int>(n - 1 - y) + lane.phase) % period < lane.dash;
    };
    std::size_t y_begin = static_cast<std::size_t>(std::ceil(top));
    std::size_t y_end = n;
    while (y_begin < n && !in_dash(y_begin)) ++y_begin;
    while (y_end > y_begin && !in_dash(y_end - 1)) --y_end;
    for (std::size_t y = y_begin; y < y_end; ++y) {
      const double t = (bottom - static_cast<double>(y)) / (bottom - vy);
      const double cx = lane.bottom_x + t * dx;
      const auto x0 = static_cast<long>(std::floor(cx - 2 * half - 2));
      const auto x1 = static_cast<long>(std::ceil(cx + 2 * half + 2));
      for (long x = std::max(0L, x0); x <= std::min(static_cast<long>(n) - 1, x1); ++x) {
        const double px = static_cast<double>(x) - lane.bottom_x;
        const double py = static_cast<double>(y) - bottom;
        const double dist = std::abs(px * uy - py * ux);
        if (dist > half) continue;
        const std::size_t idx = y * n + static_cast<std::size_t>(x);
        label[idx] = cls;
        if (in_dash(y)) visible[idx] = 1;
      }
    }
  }

  std::vector<float> frame(n * n, 0.0f);
  std::vector<std::uint8_t> border(n * n, 0);
  std::bernoulli_distribution keep_edge(0.9);
  std::bernoulli_distribution polarity(0.5);
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      const std::size_t idx = y * n + x;
      if (!visible[idx]) continue;
      border[idx] = x == 0 || y == 0 || x + 1 == n || y + 1 == n || !visible[idx - 1] || !visible[idx + 1] ||
                    !visible[idx - n] || !visible[idx + n];
      if (border[idx] && keep_edge(rng)) frame[idx] = polarity(rng) ? kPositive : kNegative;
    }
  }
  std::bernoulli_distribution salt(0.01);
  for (auto& v : frame) {
    if (salt(rng)) v = polarity(rng) ? kPositive : kNegative;
  }

  // Dropped edge pixels must not leave a labelled pixel farther than 3 px
  // from every activation; re-light the first edge pixel in reach if so.
  const long ln = static_cast<long>(n);
  auto within_reach = [&](long y, long x, auto&& predicate) -> long {
    for (long dy = -3; dy <= 3; ++dy) {
      for (long dx = -3; dx <= 3; ++dx) {
        const long yy = y + dy, xx = x + dx;
        if (dx * dx + dy * dy > 9 || yy < 0 || xx < 0 || yy >= ln || xx >= ln) continue;
        if (predicate(yy * ln + xx)) return yy * ln + xx;
      }
    }
    return -1;
  };
  for (long y = 0; y < ln; ++y) {
    for (long x = 0; x < ln; ++x) {
      if (!label[static_cast<std::size_t>(y * ln + x)]) continue;
      if (within_reach(y, x, [&](long i) { return frame[static_cast<std::size_t>(i)] > 0.0f; }) >= 0) continue;
      const long edge = within_reach(y, x, [&](long i) { return border[static_cast<std::size_t>(i)] != 0; });
      if (edge >= 0) frame[static_cast<std::size_t>(edge)] = kPositive;
    }
  }

  SegmentationSample out;
  out.id = "synth_" + std::to_string(seed);
  out.height = n;
  out.width = n;
  out.channels = 1;
  out.frame = std::move(frame);
  out.label = std::move(label);
  return out;
}

}  // namespace ldnet
