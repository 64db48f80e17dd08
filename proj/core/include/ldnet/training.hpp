#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ldnet/config.hpp"
#include "ldnet/data.hpp"
#include "ldnet/metrics.hpp"
#include "ldnet/model.hpp"

namespace ldnet {

struct TrainConfig {
  double initial_lr = 5e-4;
  double adam_eps = 1e-8;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 1e-4;
  double power = 0.9;
  int max_epochs = 100;
  std::size_t batch_size = 4;
  double kp_start = 0.0;
  double kp_end = 0.5;
  /// false: the scheduled value is the keep probability itself.
  /// true: it is read as a drop rate, keep probability = 1 - value.
  bool kp_inverted = false;
  /// Reuse the same regularizer masks every epoch.
  bool freeze_masks = false;
  std::uint64_t seed = 0;
  std::string precision = "float";  // float | double

  std::vector<std::string> validate() const;
  std::string to_text() const;
  static TrainConfig from_key_values(const KeyValues& kv, std::vector<std::string>& errors);
  bool operator==(const TrainConfig&) const = default;
};

/// initial_lr * (1 - epoch/max_epochs)^power. Throws if epoch is outside [0, max_epochs].
double poly_lr(int epoch, const TrainConfig& config);
/// Keep probability for DropBlock at `epoch`, linear from kp_start to kp_end.
double kp_schedule(int epoch, const TrainConfig& config);

class NonFiniteGradientError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m;  // one per trainable parameter, in order
  std::vector<std::vector<T>> v;
  std::uint64_t step = 0;
};

/// One Adam update over `params` (trainable entries only), with L2 weight
/// decay added to the gradient and bias-corrected moments. A missing
/// gradient counts as zero. A non-finite gradient aborts the whole step
/// before anything is modified.
template <typename T>
void adam_step(const ParamList<T>& params, AdamState<T>& state, double lr, const TrainConfig& config);

/// Stacks samples into an [N,C,H,W] tensor and an int32 label array.
template <typename T>
Tensor<T> batch_frames(const std::vector<const SegmentationSample*>& batch);
std::vector<std::int32_t> batch_labels(const std::vector<const SegmentationSample*>& batch);

template <typename T>
class Trainer {
 public:
  Trainer(Ldnet<T>& model, TrainConfig config);

  /// One shuffled pass at `epoch` (0-based): sets lr and keep probability
  /// from the schedules, returns the sample-weighted mean loss.
  double train_epoch(const std::vector<SegmentationSample>& samples, int epoch);

  const TrainConfig& config() const { return config_; }
  AdamState<T>& state() { return state_; }
  Ldnet<T>& model() { return model_; }

  /// Checkpoint holding parameters, buffers, Adam moments and the number of
  /// completed epochs.
  void save(const std::filesystem::path& path, int epochs_done) const;
  /// Restores everything written by save(); returns the completed epoch count.
  int resume(const std::filesystem::path& path);

 private:
  Ldnet<T>& model_;
  TrainConfig config_;
  AdamState<T> state_;
};

using Predictor = std::function<std::vector<std::uint8_t>(const SegmentationSample&)>;

/// Accumulates confusion counts of `predict` over `samples`.
ConfusionCounts evaluate(const Predictor& predict, const std::vector<SegmentationSample>& samples,
                         std::size_t num_classes);

/// Eval-mode argmax prediction of `model`.
template <typename T>
ConfusionCounts evaluate(Ldnet<T>& model, const std::vector<SegmentationSample>& samples, std::size_t batch_size = 4);

template <typename T>
std::vector<std::uint8_t> predict_mask(Ldnet<T>& model, const SegmentationSample& sample);

extern template class Trainer<float>;
extern template class Trainer<double>;

}  // namespace ldnet
