#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "ldnet/ops.hpp"
#include "ldnet/tensor.hpp"

namespace ldnet {

/// A named tensor inside a parameter collection. Buffers such as running
/// statistics are listed with `trainable == false`.
template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
  bool trainable = true;
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

using InitRng = std::mt19937_64;

/// Fan-in scaled normal: stddev sqrt(2 / (Cin*K*K)).
template <typename T>
Tensor<T> he_normal(Shape shape, InitRng& rng);

template <typename T>
struct Conv2dParams {
  Tensor<T> weight;  // [Cout, Cin, K, K]
  Tensor<T> bias;    // [Cout], may be undefined

  static Conv2dParams make(std::size_t cin, std::size_t cout, std::size_t k, bool with_bias, InitRng& rng);
  void collect(const std::string& prefix, ParamList<T>& out) const;
};

template <typename T>
struct BatchNormParams {
  Tensor<T> scale;
  Tensor<T> shift;
  BatchNormStats<T> stats;

  static BatchNormParams make(std::size_t channels);
  void collect(const std::string& prefix, ParamList<T>& out) const;
};

// ---------------------------------------------------------------------------
// Convolution stack: conv3x3 -> BN -> conv3x3 -> BN -> ReLU, stride 1, same padding.

template <typename T>
struct ConvStackParams {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  Conv2dParams<T> conv1, conv2;
  BatchNormParams<T> bn1, bn2;

  static ConvStackParams make(std::size_t cin, std::size_t cout, InitRng& rng);
  void collect(const std::string& prefix, ParamList<T>& out) const;
};

/// Trainable scalars of one stack: 9*Cin*Cout + 9*Cout^2 + 2*Cout (biases) + 4*Cout (BN).
std::size_t conv_stack_param_count(std::size_t cin, std::size_t cout);

template <typename T>
Tensor<T> conv_stack_forward(ConvStackParams<T>& params, const Tensor<T>& input, Mode mode);

// ---------------------------------------------------------------------------
// DropBlock

struct DropBlockConfig {
  int block_size = 5;
  double keep_prob = 0.9;
  Mode mode = Mode::kTrain;
  std::uint64_t seed = 0;
};

/// Seed probability ((1-kP)/BS^2) * feat^2/(feat-BS+1)^2, clamped to [0,1].
/// Throws if feat < BS or kP is outside [0,1].
double dropblock_gamma(double keep_prob, int block_size, int feat);

/// Keep-mask (1 kept, 0 dropped) for `planes` independent H x W maps. Block
/// centers are drawn Bernoulli(gamma) over the valid region whose BS x BS
/// squares lie fully inside the map.
std::vector<std::uint8_t> dropblock_mask(std::size_t planes, std::size_t height, std::size_t width,
                                         int block_size, double gamma, std::uint64_t seed);

/// Eval mode returns the input unchanged. Train mode zeroes the sampled
/// blocks and rescales survivors by count(M)/count_ones(M); a fully dropped
/// map yields zeros. Gamma comes from the map height.
template <typename T>
Tensor<T> dropblock_apply(const DropBlockConfig& config, const Tensor<T>& input);

/// Whole-channel dropout with 1/(1-p) rescaling; identity in eval mode.
template <typename T>
Tensor<T> spatial_dropout2d(const Tensor<T>& input, double p, Mode mode, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Atrous spatial pyramid pooling: six parallel 3x3 branches, summed.

inline constexpr std::array<int, 6> kAsppRates{1, 2, 4, 8, 16, 32};

template <typename T>
struct AsppParams {
  std::size_t channels = 0;
  std::array<Conv2dParams<T>, kAsppRates.size()> branches;

  static AsppParams make(std::size_t channels, InitRng& rng);
  void collect(const std::string& prefix, ParamList<T>& out) const;
};

template <typename T>
Tensor<T> aspp_forward(const AsppParams<T>& params, const Tensor<T>& input);

// ---------------------------------------------------------------------------
// Additive attention gate.

template <typename T>
struct AttentionGateParams {
  std::size_t f_l = 0, f_g = 0, f_int = 0;
  Tensor<T> w_x;       // [F_int, F_l, 1, 1]
  Tensor<T> w_g;       // [F_int, F_g, 1, 1]
  Tensor<T> b_g;       // [F_int]
  Tensor<T> psi;       // [1, F_int, 1, 1]
  Tensor<T> b_psi;     // [1]

  static AttentionGateParams make(std::size_t f_l, std::size_t f_g, std::size_t f_int, InitRng& rng);
  void collect(const std::string& prefix, ParamList<T>& out) const;
};

/// Default intermediate width: F_l / 2, at least 1.
inline std::size_t default_f_int(std::size_t f_l) { return f_l / 2 ? f_l / 2 : 1; }

std::size_t attention_gate_param_count(std::size_t f_l, std::size_t f_g, std::size_t f_int);

template <typename T>
struct GateOutput {
  Tensor<T> gated;  // x * alpha
  Tensor<T> alpha;  // [N,1,H,W], in (0,1)
};

/// alpha = sigmoid(psi^T relu(W_x x + W_g g + b_g) + b_psi); gated = x * alpha.
template <typename T>
GateOutput<T> attention_gate(const AttentionGateParams<T>& params, const Tensor<T>& x_skip, const Tensor<T>& g);

}  // namespace ldnet
