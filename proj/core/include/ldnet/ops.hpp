#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ldnet/tensor.hpp"

namespace ldnet {

enum class Mode { kTrain, kEval };

struct Conv2dGeometry {
  int stride = 1;
  int padding = 0;
  int dilation = 1;
};

/// Extent covered by a K-tap kernel sampled at the given rate: K + (K-1)(r-1).
int effective_kernel_extent(int kernel, int rate);

/// "Same" padding for an odd kernel at the given dilation.
inline int same_padding(int kernel, int dilation) { return dilation * (kernel - 1) / 2; }

/// NCHW convolution with kernel [Cout, Cin, K, K]. `bias` may be undefined.
/// Each output sums its taps in (Cin, kh, kw) order and adds the bias last,
/// so dilation 1 reproduces the textbook loop nest bit for bit.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                 Conv2dGeometry geometry);

template <typename T>
Tensor<T> relu(const Tensor<T>& input);

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& input);

/// Running statistics of one batch-norm layer. `batches_seen` is a one-element
/// tensor so it serializes alongside the other buffers.
template <typename T>
struct BatchNormStats {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  Tensor<T> batches_seen;

  static BatchNormStats make(std::size_t channels) {
    return {Tensor<T>::zeros({channels}), Tensor<T>::ones({channels}), Tensor<T>::zeros({1})};
  }
};

inline constexpr double kBatchNormMomentum = 0.1;
inline constexpr double kBatchNormEps = 1e-5;

/// Train mode normalizes with batch statistics (biased variance) and folds
/// them into the running estimates (unbiased variance, momentum 0.1). Eval
/// mode uses the running estimates.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& input, const Tensor<T>& scale, const Tensor<T>& shift,
                      BatchNormStats<T>& stats, Mode mode);

/// 2x2 window, stride 2. Ties resolve to the lowest linear index.
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& input);

/// Bilinear 2x upsampling, half-pixel centers (align_corners = false).
template <typename T>
Tensor<T> upsample2x(const Tensor<T>& input);

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& input, std::size_t begin, std::size_t count);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

/// x [N,C,H,W] times a [N,1,H,W], broadcast over channels.
template <typename T>
Tensor<T> mul_broadcast_channels(const Tensor<T>& x, const Tensor<T>& a);

/// Elementwise product with a constant (non-differentiable) mask.
template <typename T>
Tensor<T> mask_mul(const Tensor<T>& input, std::vector<T> mask);

template <typename T>
Tensor<T> scale(const Tensor<T>& input, T factor);

template <typename T>
Tensor<T> sum(const Tensor<T>& input);

/// sum(input * weights) with constant weights.
template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& input, std::vector<T> weights);

/// Mean over all N*H*W pixels of -log softmax(logits)[label]. Labels are
/// laid out [N,H,W].
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> labels);

/// Per-pixel softmax over the channel axis (no graph).
template <typename T>
std::vector<T> softmax_channels(const Tensor<T>& logits);

/// Per-pixel argmax over channels, laid out [N,H,W].
template <typename T>
std::vector<std::uint8_t> argmax_channels(const Tensor<T>& logits);

}  // namespace ldnet
