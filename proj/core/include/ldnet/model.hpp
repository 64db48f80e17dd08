#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "ldnet/config.hpp"
#include "ldnet/layers.hpp"

namespace ldnet {

enum class Regularizer { kDropBlock, kSpatialDropout, kNone };

std::string to_string(Regularizer r);
bool parse_regularizer(std::string_view text, Regularizer& out);

/// Architecture hyperparameters. Encoder widths are F, 2F, 4F, 8F.
struct LdnetConfig {
  std::size_t in_channels = 1;
  std::size_t base_width = 16;
  std::size_t num_classes = 5;
  Regularizer regularizer = Regularizer::kDropBlock;
  int block_size = 5;
  double dropout_p = 0.1;
  bool attention = true;
  std::size_t attention_f_int = 0;  // 0: F_l / 2 per gate
  std::uint64_t init_seed = 0;

  std::vector<std::string> validate() const;
  /// key=value lines in a fixed order.
  std::string to_text() const;
  static LdnetConfig from_key_values(const KeyValues& kv, std::vector<std::string>& errors);
  bool operator==(const LdnetConfig&) const = default;
};

template <typename T>
struct DecoderBlockParams {
  AttentionGateParams<T> gate;
  ConvStackParams<T> stack;
};

template <typename T>
struct LdnetParams {
  std::array<ConvStackParams<T>, 4> encoder;
  AsppParams<T> aspp;
  std::array<DecoderBlockParams<T>, 3> decoder;  // coarse to fine
  Conv2dParams<T> classifier;

  static LdnetParams make(const LdnetConfig& config);
  /// Every tensor with a stable dotted name, in checkpoint order.
  ParamList<T> collect() const;
};

/// Closed form of the trainable scalar count:
///   encoder  sum_b stack(c_b, c_{b+1})  with stack(i,o) = 9io + 9o^2 + 6o
///   aspp     6 * (9 * (8F)^2 + 8F)
///   decoder  sum_d gate(F_l, F_g, F_int) + stack(F_l + F_g, F_l)
///            with gate = F_l*F_int + F_g*F_int + 2*F_int + 1
///   head     F * classes + classes
std::size_t param_count(const LdnetConfig& config);

struct ForwardOptions {
  Mode mode = Mode::kEval;
  /// Seeds the stochastic regularizers; the same seed reproduces the same
  /// masks, which is how DropBlock is frozen for gradient checks.
  std::uint64_t seed = 0;
};

template <typename T>
struct LdnetTrace {
  Tensor<T> logits;
  std::array<Tensor<T>, 3> skips;  // fine to coarse: S, S/2, S/4
  Tensor<T> deepest;               // S/8, 8F channels
  Tensor<T> aspp;
  std::array<Tensor<T>, 3> alphas;  // coarse to fine; undefined when attention is off
};

template <typename T>
class Ldnet {
 public:
  explicit Ldnet(LdnetConfig config);

  Tensor<T> forward(const Tensor<T>& input, const ForwardOptions& options = {}) {
    return trace(input, options).logits;
  }
  LdnetTrace<T> trace(const Tensor<T>& input, const ForwardOptions& options = {});

  const LdnetConfig& config() const { return config_; }
  LdnetParams<T>& params() { return params_; }
  const LdnetParams<T>& params() const { return params_; }

  ParamList<T> parameters() const { return params_.collect(); }
  ParamList<T> trainable_parameters() const;

  /// Keep probability used by DropBlock in train mode.
  double keep_prob() const { return keep_prob_; }
  void set_keep_prob(double kp) { keep_prob_ = kp; }

 private:
  Tensor<T> regularize(const Tensor<T>& h, std::size_t block, const ForwardOptions& options) const;

  LdnetConfig config_;
  LdnetParams<T> params_;
  double keep_prob_ = 0.9;
};

extern template class Ldnet<float>;
extern template class Ldnet<double>;

}  // namespace ldnet
