#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace ldnet {

/// One event frame with its per-pixel class labels.
struct SegmentationSample {
  std::string id;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;
  std::vector<float> frame;          // CHW, values in [0,1]
  std::vector<std::uint8_t> label;   // HW class indices

  bool operator==(const SegmentationSample&) const = default;
};

// Dataset layout on disk:
//   <root>/images/<stem>.png   8-bit gray or RGB frame
//   <root>/labels/<stem>.png   8-bit single channel, pixel value = class index

/// Samples sorted by stem. Throws naming the file on a missing counterpart,
/// an unreadable image, mismatched sizes, or a label value >= num_classes.
std::vector<SegmentationSample> load_dataset(const std::filesystem::path& root, std::size_t num_classes,
                                             std::size_t in_channels = 1);

/// Writes the frame (quantized to 8 bits) and label under `root`.
void save_sample(const std::filesystem::path& root, const SegmentationSample& sample);

/// Frame resized bilinearly (half-pixel centers), label nearest-neighbor.
SegmentationSample resize_sample(const SegmentationSample& sample, std::size_t target);

struct SplitSpec {
  double train = 0.50;
  double val = 0.16;  // test takes the remainder
  std::uint64_t seed = 0;
};

struct DatasetSplits {
  std::vector<SegmentationSample> train, val, test;
};

/// Seeded shuffle, then contiguous floor-sized train/val slices; the rest is test.
DatasetSplits split_dataset(std::vector<SegmentationSample> samples, const SplitSpec& spec);

struct SynthOptions {
  std::size_t size = 256;
  std::size_t num_classes = 2;  // 2 (binary) or 5 (four lane classes + background)
  int min_lanes = 1;
  int max_lanes = 4;
};

/// Synthetic event-frame road scene: 1-4 straight lanes converging toward a
/// vanishing point, solid or dashed, 2-6 px wide. The frame shows sparse
/// edge activations (stroke borders bright, interiors dark) plus
/// salt-and-pepper polarity noise. Labels are continuous strokes; in the
/// multiclass case lanes are numbered 1..n from left to right.
SegmentationSample synth_scene(std::uint64_t seed, const SynthOptions& options = {});

}  // namespace ldnet
