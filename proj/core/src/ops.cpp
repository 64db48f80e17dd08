#include "ldnet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "ldnet/log.hpp"

namespace ldnet {

namespace {

void require(bool ok, const std::string& message) {
  if (!ok) throw std::invalid_argument(message);
}

template <typename T>
void require_rank4(const Tensor<T>& t, const char* op, const char* what) {
  require(t.defined() && t.rank() == 4, std::string(op) + ": " + what + " must be rank 4 (NCHW), got " +
                                            (t.defined() ? to_string(t.shape()) : "undefined"));
}

struct ConvDims {
  std::size_t batch, cin, h, w, cout, k, ho, wo;
  long stride, pad, dil;
};

// Output indices o in [lo, hi) for which o*stride - pad + tap lies inside [0, extent).
void valid_range(long extent, long out_extent, long stride, long pad, long tap, long& lo, long& hi) {
  const long a = pad - tap;
  lo = a <= 0 ? 0 : (a + stride - 1) / stride;
  const long b = extent - 1 + pad - tap;
  hi = b < 0 ? 0 : std::min(out_extent, b / stride + 1);
  if (lo > hi) lo = hi;
}

template <typename T>
void conv_forward(const T* __restrict x, const T* __restrict w, const T* b, T* __restrict y,
                  const ConvDims& d) {
  const std::size_t in_plane = d.h * d.w;
  const std::size_t out_plane = d.ho * d.wo;
  for (std::size_t n = 0; n < d.batch; ++n) {
    for (std::size_t co = 0; co < d.cout; ++co) {
      T* yp = y + (n * d.cout + co) * out_plane;
      std::fill(yp, yp + out_plane, T{0});
      for (std::size_t ci = 0; ci < d.cin; ++ci) {
        const T* xp = x + (n * d.cin + ci) * in_plane;
        const T* wp = w + (co * d.cin + ci) * d.k * d.k;
        for (std::size_t kh = 0; kh < d.k; ++kh) {
          long oh0, oh1;
          valid_range(static_cast<long>(d.h), static_cast<long>(d.ho), d.stride, d.pad,
                      static_cast<long>(kh) * d.dil, oh0, oh1);
          for (std::size_t kw = 0; kw < d.k; ++kw) {
            long ow0, ow1;
            const long tap_w = static_cast<long>(kw) * d.dil;
            valid_range(static_cast<long>(d.w), static_cast<long>(d.wo), d.stride, d.pad, tap_w, ow0, ow1);
            if (ow0 >= ow1) continue;
            const T wv = wp[kh * d.k + kw];
            for (long oh = oh0; oh < oh1; ++oh) {
              const long ih = oh * d.stride - d.pad + static_cast<long>(kh) * d.dil;
              const T* xr = xp + ih * static_cast<long>(d.w);
              T* yr = yp + oh * static_cast<long>(d.wo);
              if (d.stride == 1) {
                const T* xs = xr + (tap_w - d.pad);
                for (long ow = ow0; ow < ow1; ++ow) yr[ow] += wv * xs[ow];
              } else {
                for (long ow = ow0; ow < ow1; ++ow) yr[ow] += wv * xr[ow * d.stride - d.pad + tap_w];
              }
            }
          }
        }
      }
      if (b) {
        const T bv = b[co];
        for (std::size_t i = 0; i < out_plane; ++i) yp[i] += bv;
      }
    }
  }
}

template <typename T>
void conv_backward_input(const T* __restrict gy, const T* __restrict w, T* __restrict gx, const ConvDims& d) {
  const std::size_t in_plane = d.h * d.w;
  const std::size_t out_plane = d.ho * d.wo;
  for (std::size_t n = 0; n < d.batch; ++n) {
    for (std::size_t ci = 0; ci < d.cin; ++ci) {
      T* gxp = gx + (n * d.cin + ci) * in_plane;
      for (std::size_t co = 0; co < d.cout; ++co) {
        const T* gyp = gy + (n * d.cout + co) * out_plane;
        const T* wp = w + (co * d.cin + ci) * d.k * d.k;
        for (std::size_t kh = 0; kh < d.k; ++kh) {
          long oh0, oh1;
          valid_range(static_cast<long>(d.h), static_cast<long>(d.ho), d.stride, d.pad,
                      static_cast<long>(kh) * d.dil, oh0, oh1);
          for (std::size_t kw = 0; kw < d.k; ++kw) {
            long ow0, ow1;
            const long tap_w = static_cast<long>(kw) * d.dil;
            valid_range(static_cast<long>(d.w), static_cast<long>(d.wo), d.stride, d.pad, tap_w, ow0, ow1);
            if (ow0 >= ow1) continue;
            const T wv = wp[kh * d.k + kw];
            for (long oh = oh0; oh < oh1; ++oh) {
              const long ih = oh * d.stride - d.pad + static_cast<long>(kh) * d.dil;
              T* gxr = gxp + ih * static_cast<long>(d.w);
              const T* gyr = gyp + oh * static_cast<long>(d.wo);
              if (d.stride == 1) {
                T* gxs = gxr + (tap_w - d.pad);
                for (long ow = ow0; ow < ow1; ++ow) gxs[ow] += wv * gyr[ow];
              } else {
                for (long ow = ow0; ow < ow1; ++ow) gxr[ow * d.stride - d.pad + tap_w] += wv * gyr[ow];
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void conv_backward_kernel(const T* __restrict gy, const T* __restrict x, T* __restrict gw, const ConvDims& d) {
  const std::size_t in_plane = d.h * d.w;
  const std::size_t out_plane = d.ho * d.wo;
  std::vector<T> row(d.wo);
  for (std::size_t co = 0; co < d.cout; ++co) {
    for (std::size_t ci = 0; ci < d.cin; ++ci) {
      T* gwp = gw + (co * d.cin + ci) * d.k * d.k;
      for (std::size_t kh = 0; kh < d.k; ++kh) {
        long oh0, oh1;
        valid_range(static_cast<long>(d.h), static_cast<long>(d.ho), d.stride, d.pad,
                    static_cast<long>(kh) * d.dil, oh0, oh1);
        for (std::size_t kw = 0; kw < d.k; ++kw) {
          long ow0, ow1;
          const long tap_w = static_cast<long>(kw) * d.dil;
          valid_range(static_cast<long>(d.w), static_cast<long>(d.wo), d.stride, d.pad, tap_w, ow0, ow1);
          if (ow0 >= ow1 || oh0 >= oh1) continue;
          std::fill(row.begin(), row.end(), T{0});
          T* acc = row.data();
          for (std::size_t n = 0; n < d.batch; ++n) {
            const T* gyp = gy + (n * d.cout + co) * out_plane;
            const T* xp = x + (n * d.cin + ci) * in_plane;
            for (long oh = oh0; oh < oh1; ++oh) {
              const long ih = oh * d.stride - d.pad + static_cast<long>(kh) * d.dil;
              const T* xr = xp + ih * static_cast<long>(d.w);
              const T* gyr = gyp + oh * static_cast<long>(d.wo);
              if (d.stride == 1) {
                const T* xs = xr + (tap_w - d.pad);
                for (long ow = ow0; ow < ow1; ++ow) acc[ow] += gyr[ow] * xs[ow];
              } else {
                for (long ow = ow0; ow < ow1; ++ow) acc[ow] += gyr[ow] * xr[ow * d.stride - d.pad + tap_w];
              }
            }
          }
          T total{0};
          for (long ow = ow0; ow < ow1; ++ow) total += acc[ow];
          gwp[kh * d.k + kw] += total;
        }
      }
    }
  }
}

template <typename T>
T stable_sigmoid(T v) {
  if (v >= T{0}) return T{1} / (T{1} + std::exp(-v));
  const T e = std::exp(v);
  return e / (T{1} + e);
}

}  // namespace

int effective_kernel_extent(int kernel, int rate) { return kernel + (kernel - 1) * (rate - 1); }

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                 Conv2dGeometry geometry) {
  require_rank4(input, "conv2d", "input");
  require_rank4(kernel, "conv2d", "kernel");
  require(geometry.stride >= 1, "conv2d: stride must be >= 1");
  require(geometry.dilation >= 1, "conv2d: dilation rate must be >= 1");
  require(geometry.padding >= 0, "conv2d: padding must be >= 0");
  const auto& is = input.shape();
  const auto& ks = kernel.shape();
  require(ks[2] == ks[3], "conv2d: kernel must be square, got " + to_string(ks));
  require(is[1] == ks[1], "conv2d: input channel dimension (dim 1) is " + std::to_string(is[1]) +
                              " but kernel expects Cin=" + std::to_string(ks[1]));
  if (bias.defined()) {
    require(bias.rank() == 1 && bias.dim(0) == ks[0],
            "conv2d: bias must have shape [" + std::to_string(ks[0]) + "], got " + to_string(bias.shape()));
  }
  const long kd = effective_kernel_extent(static_cast<int>(ks[2]), geometry.dilation);
  const long span_h = static_cast<long>(is[2]) + 2L * geometry.padding - kd;
  const long span_w = static_cast<long>(is[3]) + 2L * geometry.padding - kd;
  require(span_h >= 0, "conv2d: non-positive output height (H=" + std::to_string(is[2]) +
                           ", effective kernel " + std::to_string(kd) + ", padding " +
                           std::to_string(geometry.padding) + ")");
  require(span_w >= 0, "conv2d: non-positive output width (W=" + std::to_string(is[3]) +
                           ", effective kernel " + std::to_string(kd) + ", padding " +
                           std::to_string(geometry.padding) + ")");

  ConvDims d{};
  d.batch = is[0];
  d.cin = is[1];
  d.h = is[2];
  d.w = is[3];
  d.cout = ks[0];
  d.k = ks[2];
  d.stride = geometry.stride;
  d.pad = geometry.padding;
  d.dil = geometry.dilation;
  d.ho = static_cast<std::size_t>(span_h / geometry.stride + 1);
  d.wo = static_cast<std::size_t>(span_w / geometry.stride + 1);

  std::vector<T> out(d.batch * d.cout * d.ho * d.wo);
  conv_forward(input.values().data(), kernel.values().data(),
               bias.defined() ? bias.values().data() : nullptr, out.data(), d);

  const bool has_bias = bias.defined();
  auto backward = [d, has_bias](OpRecord<T>& rec, const TensorNode<T>& out_node) {
    auto& x = *rec.inputs[0];
    auto& w = *rec.inputs[1];
    const T* gy = out_node.grad.data();
    if (x.requires_grad) conv_backward_input(gy, w.values.data(), x.grad.data(), d);
    if (w.requires_grad) conv_backward_kernel(gy, x.values.data(), w.grad.data(), d);
    if (has_bias && rec.inputs[2]->requires_grad) {
      auto& b = *rec.inputs[2];
      const std::size_t plane = d.ho * d.wo;
      for (std::size_t n = 0; n < d.batch; ++n) {
        for (std::size_t co = 0; co < d.cout; ++co) {
          const T* g = gy + (n * d.cout + co) * plane;
          T s{0};
          for (std::size_t i = 0; i < plane; ++i) s += g[i];
          b.grad[co] += s;
        }
      }
    }
  };
  Shape shape{d.batch, d.cout, d.ho, d.wo};
  if (has_bias) {
    return detail::record<T>(OpKind::kConv2d, std::move(shape), std::move(out), {input, kernel, bias},
                             std::move(backward));
  }
  return detail::record<T>(OpKind::kConv2d, std::move(shape), std::move(out), {input, kernel},
                           std::move(backward));
}

template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
  std::vector<T> out(input.numel());
  const auto in = input.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] > T{0} ? in[i] : T{0};
  return detail::record<T>(OpKind::kRelu, input.shape(), std::move(out), {input},
                           [](OpRecord<T>& rec, const TensorNode<T>& y) {
                             auto& x = *rec.inputs[0];
                             for (std::size_t i = 0; i < y.grad.size(); ++i) {
                               if (x.values[i] > T{0}) x.grad[i] += y.grad[i];
                             }
                           });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& input) {
  std::vector<T> out(input.numel());
  const auto in = input.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(in[i]);
  return detail::record<T>(OpKind::kSigmoid, input.shape(), std::move(out), {input},
                           [](OpRecord<T>& rec, const TensorNode<T>& y) {
                             auto& x = *rec.inputs[0];
                             for (std::size_t i = 0; i < y.grad.size(); ++i) {
                               const T s = y.values[i];
                               x.grad[i] += y.grad[i] * s * (T{1} - s);
                             }
                           });
}

template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& input, const Tensor<T>& scale, const Tensor<T>& shift,
                      BatchNormStats<T>& stats, Mode mode) {
  require_rank4(input, "batchnorm2d", "input");
  const auto& s = input.shape();
  const std::size_t batch = s[0], channels = s[1], plane = s[2] * s[3];
  const std::size_t count = batch * plane;
  require(scale.numel() == channels && shift.numel() == channels,
          "batchnorm2d: scale/shift must have " + std::to_string(channels) + " channels");
  require(stats.running_mean.numel() == channels && stats.running_var.numel() == channels,
          "batchnorm2d: running statistics must have " + std::to_string(channels) + " channels");

  const auto x = input.values();
  const auto g = scale.values();
  const auto b = shift.values();
  std::vector<T> out(input.numel());
  std::vector<T> xhat(mode == Mode::kTrain ? input.numel() : 0);
  std::vector<T> inv_std(channels);

  if (mode == Mode::kTrain) {
    require(count >= 2, "batchnorm2d: train mode needs batch*H*W >= 2, got " + std::to_string(count));
    auto rm = stats.running_mean.mutable_values();
    auto rv = stats.running_var.mutable_values();
    for (std::size_t c = 0; c < channels; ++c) {
      double mean = 0.0;
      for (std::size_t n = 0; n < batch; ++n) {
        const T* p = x.data() + (n * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) mean += p[i];
      }
      mean /= static_cast<double>(count);
      double var = 0.0;
      for (std::size_t n = 0; n < batch; ++n) {
        const T* p = x.data() + (n * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const double dv = p[i] - mean;
          var += dv * dv;
        }
      }
      const double biased = var / static_cast<double>(count);
      const double unbiased = var / static_cast<double>(count - 1);
      const T istd = static_cast<T>(1.0 / std::sqrt(biased + kBatchNormEps));
      inv_std[c] = istd;
      const T m = static_cast<T>(mean);
      for (std::size_t n = 0; n < batch; ++n) {
        const std::size_t off = (n * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const T xh = (x[off + i] - m) * istd;
          xhat[off + i] = xh;
          out[off + i] = g[c] * xh + b[c];
        }
      }
      rm[c] = static_cast<T>((1.0 - kBatchNormMomentum) * rm[c] + kBatchNormMomentum * mean);
      rv[c] = static_cast<T>((1.0 - kBatchNormMomentum) * rv[c] + kBatchNormMomentum * unbiased);
    }
    stats.batches_seen.mutable_values()[0] += T{1};

    auto backward = [batch, channels, plane, xhat = std::move(xhat), inv_std](OpRecord<T>& rec,
                                                                            const TensorNode<T>& y) {
      auto& xin = *rec.inputs[0];
      auto& gamma = *rec.inputs[1];
      auto& beta = *rec.inputs[2];
      const double m = static_cast<double>(batch * plane);
      for (std::size_t c = 0; c < channels; ++c) {
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (std::size_t n = 0; n < batch; ++n) {
          const std::size_t off = (n * channels + c) * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            sum_dy += y.grad[off + i];
            sum_dy_xhat += static_cast<double>(y.grad[off + i]) * xhat[off + i];
          }
        }
        if (gamma.requires_grad) gamma.grad[c] += static_cast<T>(sum_dy_xhat);
        if (beta.requires_grad) beta.grad[c] += static_cast<T>(sum_dy);
        if (!xin.requires_grad) continue;
        const double k = gamma.values[c] * inv_std[c] / m;
        for (std::size_t n = 0; n < batch; ++n) {
          const std::size_t off = (n * channels + c) * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            xin.grad[off + i] +=
                static_cast<T>(k * (m * y.grad[off + i] - sum_dy - xhat[off + i] * sum_dy_xhat));
          }
        }
      }
    };
    return detail::record<T>(OpKind::kBatchNorm2d, s, std::move(out), {input, scale, shift},
                             std::move(backward));
  }

  if (stats.batches_seen.values()[0] == T{0}) {
    log_warning_once("batchnorm2d: eval mode before any train step; using initial statistics (mean 0, var 1)");
  }
  const auto rm = stats.running_mean.values();
  const auto rv = stats.running_var.values();
  std::vector<T> mean(rm.begin(), rm.end());
  for (std::size_t c = 0; c < channels; ++c) {
    inv_std[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(rv[c]) + kBatchNormEps));
    for (std::size_t n = 0; n < batch; ++n) {
      const std::size_t off = (n * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) out[off + i] = g[c] * ((x[off + i] - mean[c]) * inv_std[c]) + b[c];
    }
  }
  auto backward = [batch, channels, plane, mean, inv_std](OpRecord<T>& rec, const TensorNode<T>& y) {
    auto& xin = *rec.inputs[0];
    auto& gamma = *rec.inputs[1];
    auto& beta = *rec.inputs[2];
    for (std::size_t c = 0; c < channels; ++c) {
      T sum_dy{0}, sum_dy_xhat{0};
      for (std::size_t n = 0; n < batch; ++n) {
        const std::size_t off = (n * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const T dy = y.grad[off + i];
          sum_dy += dy;
          sum_dy_xhat += dy * (xin.values[off + i] - mean[c]) * inv_std[c];
          if (xin.requires_grad) xin.grad[off + i] += dy * gamma.values[c] * inv_std[c];
        }
      }
      if (gamma.requires_grad) gamma.grad[c] += sum_dy_xhat;
      if (beta.requires_grad) beta.grad[c] += sum_dy;
    }
  };
  return detail::record<T>(OpKind::kBatchNorm2d, s, std::move(out), {input, scale, shift}, std::move(backward));
}

template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& input) {
  require_rank4(input, "maxpool2d", "input");
  const auto& s = input.shape();
  require(s[2] % 2 == 0, "maxpool2d: height " + std::to_string(s[2]) + " is odd");
  require(s[3] % 2 == 0, "maxpool2d: width " + std::to_string(s[3]) + " is odd");
  const std::size_t planes = s[0] * s[1], h = s[2], w = s[3], ho = h / 2, wo = w / 2;
  std::vector<T> out(planes * ho * wo);
  std::vector<std::uint32_t> argmax(out.size());
  const auto x = input.values();
  for (std::size_t p = 0; p < planes; ++p) {
    const T* xp = x.data() + p * h * w;
    for (std::size_t oh = 0; oh < ho; ++oh) {
      for (std::size_t ow = 0; ow < wo; ++ow) {
        std::size_t best = (2 * oh) * w + 2 * ow;
        const std::size_t cand[3] = {best + 1, best + w, best + w + 1};
        for (auto c : cand) {
          if (xp[c] > xp[best]) best = c;
        }
        const std::size_t o = (p * ho + oh) * wo + ow;
        out[o] = xp[best];
        argmax[o] = static_cast<std::uint32_t>(p * h * w + best);
      }
    }
  }
  return detail::record<T>(OpKind::kMaxPool2d, {s[0], s[1], ho, wo}, std::move(out), {input},
                           [argmax = std::move(argmax)](OpRecord<T>& rec, const TensorNode<T>& y) {
                             auto& xin = *rec.inputs[0];
                             for (std::size_t i = 0; i < argmax.size(); ++i) xin.grad[argmax[i]] += y.grad[i];
                           });
}

namespace {

struct LerpTap {
  std::size_t lo, hi;
  double frac;
};

// Source taps for 2x upsampling along one axis, half-pixel centers.
std::vector<LerpTap> upsample_taps(std::size_t in) {
  std::vector<LerpTap> taps(2 * in);
  for (std::size_t o = 0; o < 2 * in; ++o) {
    double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
    if (src < 0.0) src = 0.0;
    auto lo = static_cast<std::size_t>(src);
    if (lo > in - 1) lo = in - 1;
    const std::size_t hi = std::min(lo + 1, in - 1);
    taps[o] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace

template <typename T>
Tensor<T> upsample2x(const Tensor<T>& input) {
  require_rank4(input, "upsample2x", "input");
  const auto& s = input.shape();
  const std::size_t planes = s[0] * s[1], h = s[2], w = s[3], ho = 2 * h, wo = 2 * w;
  const auto th = upsample_taps(h);
  const auto tw = upsample_taps(w);
  std::vector<T> out(planes * ho * wo);
  const auto x = input.values();
  for (std::size_t p = 0; p < planes; ++p) {
    const T* xp = x.data() + p * h * w;
    T* yp = out.data() + p * ho * wo;
    for (std::size_t oh = 0; oh < ho; ++oh) {
      const T fh = static_cast<T>(th[oh].frac);
      const T* r0 = xp + th[oh].lo * w;
      const T* r1 = xp + th[oh].hi * w;
      for (std::size_t ow = 0; ow < wo; ++ow) {
        const T fw = static_cast<T>(tw[ow].frac);
        const T top = r0[tw[ow].lo] * (T{1} - fw) + r0[tw[ow].hi] * fw;
        const T bot = r1[tw[ow].lo] * (T{1} - fw) + r1[tw[ow].hi] * fw;
        yp[oh * wo + ow] = top * (T{1} - fh) + bot * fh;
      }
    }
  }
  auto backward = [planes, h, w, ho, wo, th, tw](OpRecord<T>& rec, const TensorNode<T>& y) {
    auto& xin = *rec.inputs[0];
    for (std::size_t p = 0; p < planes; ++p) {
      T* gx = xin.grad.data() + p * h * w;
      const T* gy = y.grad.data() + p * ho * wo;
      for (std::size_t oh = 0; oh < ho; ++oh) {
        const T fh = static_cast<T>(th[oh].frac);
        for (std::size_t ow = 0; ow < wo; ++ow) {
          const T fw = static_cast<T>(tw[ow].frac);
          const T g = gy[oh * wo + ow];
          gx[th[oh].lo * w + tw[ow].lo] += g * (T{1} - fh) * (T{1} - fw);
          gx[th[oh].lo * w + tw[ow].hi] += g * (T{1} - fh) * fw;
          gx[th[oh].hi * w + tw[ow].lo] += g * fh * (T{1} - fw);
          gx[th[oh].hi * w + tw[ow].hi] += g * fh * fw;
        }
      }
    }
  };
  return detail::record<T>(OpKind::kUpsample2x, {s[0], s[1], ho, wo}, std::move(out), {input},
                           std::move(backward));
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank4(a, "concat_channels", "first input");
  require_rank4(b, "concat_channels", "second input");
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  require(sa[0] == sb[0], "concat_channels: batch mismatch " + to_string(sa) + " vs " + to_string(sb));
  require(sa[2] == sb[2] && sa[3] == sb[3],
          "concat_channels: spatial mismatch " + to_string(sa) + " vs " + to_string(sb));
  const std::size_t plane = sa[2] * sa[3];
  const std::size_t ca = sa[1], cb = sb[1], batch = sa[0];
  std::vector<T> out(batch * (ca + cb) * plane);
  const auto va = a.values();
  const auto vb = b.values();
  for (std::size_t n = 0; n < batch; ++n) {
    std::copy_n(va.data() + n * ca * plane, ca * plane, out.data() + n * (ca + cb) * plane);
    std::copy_n(vb.data() + n * cb * plane, cb * plane, out.data() + (n * (ca + cb) + ca) * plane);
  }
  auto backward = [batch, ca, cb, plane](OpRecord<T>& rec, const TensorNode<T>& y) {
    auto& ga = *rec.inputs[0];
    auto& gb = *rec.inputs[1];
    for (std::size_t n = 0; n < batch; ++n) {
      const T* src = y.grad.data() + n * (ca + cb) * plane;
      if (ga.requires_grad) {
        T* dst = ga.grad.data() + n * ca * plane;
        for (std::size_t i = 0; i < ca * plane; ++i) dst[i] += src[i];
      }
      if (gb.requires_grad) {
        T* dst = gb.grad.data() + n * cb * plane;
        for (std::size_t i = 0; i < cb * plane; ++i) dst[i] += src[ca * plane + i];
      }
    }
  };
  return detail::record<T>(OpKind::kConcatChannels, {batch, ca + cb, sa[2], sa[3]}, std::move(out), {a, b},
                           std::move(backward));
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& input, std::size_t begin, std::size_t count) {
  require_rank4(input, "slice_channels", "input");
  const auto& s = input.shape();
  require(count > 0 && begin + count <= s[1], "slice_channels: range [" + std::to_string(begin) + ", " +
                                                  std::to_string(begin + count) + ") outside " +
                                                  std::to_string(s[1]) + " channels");
  const std::size_t plane = s[2] * s[3], batch = s[0], c = s[1];
  std::vector<T> out(batch * count * plane);
  const auto v = input.values();
  for (std::size_t n = 0; n < batch; ++n) {
    std::copy_n(v.data() + (n * c + begin) * plane, count * plane, out.data() + n * count * plane);
  }
  auto backward = [batch, c, begin, count, plane](OpRecord<T>& rec, const TensorNode<T>& y) {
    auto& x = *rec.inputs[0];
    for (std::size_t n = 0; n < batch; ++n) {
      T* dst = x.grad.data() + (n * c + begin) * plane;
      const T* src = y.grad.data() + n * count * plane;
      for (std::size_t i = 0; i < count * plane; ++i) dst[i] += src[i];
    }
  };
  return detail::record<T>(OpKind::kSliceChannels, {batch, count, s[2], s[3]}, std::move(out), {input},
                           std::move(backward));
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), "add: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  std::vector<T> out(a.numel());
  const auto va = a.values();
  const auto vb = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] + vb[i];
  return detail::record<T>(OpKind::kAdd, a.shape(), std::move(out), {a, b},
                           [](OpRecord<T>& rec, const TensorNode<T>& y) {
                             for (auto& in : rec.inputs) {
                               if (!in->requires_grad) continue;
                               for (std::size_t i = 0; i < y.grad.size(); ++i) in->grad[i] += y.grad[i];
                             }
                           });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), "mul: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  std::vector<T> out(a.numel());
  const auto va = a.values();
  const auto vb = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] * vb[i];
  return detail::record<T>(OpKind::kMul, a.shape(), std::move(out), {a, b},
                           [](OpRecord<T>& rec, const TensorNode<T>& y) {
                             auto& x0 = *rec.inputs[0];
                             auto& x1 = *rec.inputs[1];
                             for (std::size_t i = 0; i < y.grad.size(); ++i) {
                               if (x0.requires_grad) x0.grad[i] += y.grad[i] * x1.values[i];
                               if (x1.requires_grad) x1.grad[i] += y.grad[i] * x0.values[i];
                             }
                           });
}

template <typename T>
Tensor<T> mul_broadcast_channels(const Tensor<T>& x, const Tensor<T>& a) {
  require_rank4(x, "mul_broadcast_channels", "input");
  require_rank4(a, "mul_broadcast_channels", "coefficients");
  const auto& sx = x.shape();
  const auto& sa = a.shape();
  require(sa[1] == 1, "mul_broadcast_channels: coefficient map must have one channel, got " + to_string(sa));
  require(sa[0] == sx[0] && sa[2] == sx[2] && sa[3] == sx[3],
          "mul_broadcast_channels: spatial mismatch " + to_string(sx) + " vs " + to_string(sa));
  const std::size_t batch = sx[0], channels = sx[1], plane = sx[2] * sx[3];
  std::vector<T> out(x.numel());
  const auto vx = x.values();
  const auto va = a.values();
  for (std::size_t n = 0; n < batch; ++n) {
    const T* ap = va.data() + n * plane;
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t off = (n * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) out[off + i] = vx[off + i] * ap[i];
    }
  }
  auto backward = [batch, channels, plane](OpRecord<T>& rec, const TensorNode<T>& y) {
    auto& xin = *rec.inputs[0];
    auto& ain = *rec.inputs[1];
    for (std::size_t n = 0; n < batch; ++n) {
      for (std::size_t c = 0; c < channels; ++c) {
        const std::size_t off = (n * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const T g = y.grad[off + i];
          if (xin.requires_grad) xin.grad[off + i] += g * ain.values[n * plane + i];
          if (ain.requires_grad) ain.grad[n * plane + i] += g * xin.values[off + i];
        }
      }
    }
  };
  return detail::record<T>(OpKind::kMulBroadcastChannels, sx, std::move(out), {x, a}, std::move(backward));
}

template <typename T>
Tensor<T> mask_mul(const Tensor<T>& input, std::vector<T> mask) {
  require(mask.size() == input.numel(), "mask_mul: mask holds " + std::to_string(mask.size()) +
                                            " values for tensor " + to_string(input.shape()));
  std::vector<T> out(input.numel());
  const auto v = input.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] * mask[i];
  return detail::record<T>(OpKind::kMaskMul, input.shape(), std::move(out), {input},
                           [mask = std::move(mask)](OpRecord<T>& rec, const TensorNode<T>& y) {
                             auto& x = *rec.inputs[0];
                             for (std::size_t i = 0; i < mask.size(); ++i) x.grad[i] += y.grad[i] * mask[i];
                           });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& input, T factor) {
  std::vector<T> out(input.numel());
  const auto v = input.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] * factor;
  return detail::record<T>(OpKind::kScale, input.shape(), std::move(out), {input},
                           [factor](OpRecord<T>& rec, const TensorNode<T>& y) {
                             auto& x = *rec.inputs[0];
                             for (std::size_t i = 0; i < y.grad.size(); ++i) x.grad[i] += y.grad[i] * factor;
                           });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& input) {
  T total{0};
  for (T v : input.values()) total += v;
  return detail::record<T>(OpKind::kSum, {1}, {total}, {input},
                           [](OpRecord<T>& rec, const TensorNode<T>& y) {
                             auto& x = *rec.inputs[0];
                             for (auto& g : x.grad) g += y.grad[0];
                           });
}

template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& input, std::vector<T> weights) {
  require(weights.size() == input.numel(), "weighted_sum: weight count mismatch");
  T total{0};
  const auto v = input.values();
  for (std::size_t i = 0; i < weights.size(); ++i) total += v[i] * weights[i];
  return detail::record<T>(OpKind::kWeightedSum, {1}, {total}, {input},
                           [weights = std::move(weights)](OpRecord<T>& rec, const TensorNode<T>& y) {
                             auto& x = *rec.inputs[0];
                             for (std::size_t i = 0; i < weights.size(); ++i) x.grad[i] += y.grad[0] * weights[i];
                           });
}

template <typename T>
std::vector<T> softmax_channels(const Tensor<T>& logits) {
  require_rank4(logits, "softmax", "logits");
  const auto& s = logits.shape();
  const std::size_t batch = s[0], classes = s[1], plane = s[2] * s[3];
  std::vector<T> prob(logits.numel());
  const auto z = logits.values();
  for (std::size_t n = 0; n < batch; ++n) {
    const std::size_t base = n * classes * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t c = 0; c < classes; ++c) mx = std::max(mx, z[base + c * plane + i]);
      T denom{0};
      for (std::size_t c = 0; c < classes; ++c) {
        const T e = std::exp(z[base + c * plane + i] - mx);
        prob[base + c * plane + i] = e;
        denom += e;
      }
      for (std::size_t c = 0; c < classes; ++c) prob[base + c * plane + i] /= denom;
    }
  }
  return prob;
}

template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> labels) {
  require_rank4(logits, "softmax_cross_entropy", "logits");
  const auto& s = logits.shape();
  const std::size_t batch = s[0], classes = s[1], h = s[2], w = s[3], plane = h * w;
  require(labels.size() == batch * plane, "softmax_cross_entropy: expected " + std::to_string(batch * plane) +
                                              " labels, got " + std::to_string(labels.size()));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      const std::size_t n = i / plane, r = (i % plane) / w, c = i % w;
      throw std::invalid_argument("softmax_cross_entropy: label " + std::to_string(labels[i]) +
                                  " outside [0," + std::to_string(classes) + ") at pixel (n=" +
                                  std::to_string(n) + ", y=" + std::to_string(r) + ", x=" + std::to_string(c) + ")");
    }
  }
  const auto z = logits.values();
  std::vector<T> prob(logits.numel());
  double loss = 0.0;
  for (std::size_t n = 0; n < batch; ++n) {
    const std::size_t base = n * classes * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t c = 0; c < classes; ++c) mx = std::max(mx, z[base + c * plane + i]);
      double denom = 0.0;
      for (std::size_t c = 0; c < classes; ++c) {
        const double e = std::exp(static_cast<double>(z[base + c * plane + i] - mx));
        prob[base + c * plane + i] = static_cast<T>(e);
        denom += e;
      }
      for (std::size_t c = 0; c < classes; ++c) {
        prob[base + c * plane + i] = static_cast<T>(prob[base + c * plane + i] / denom);
      }
      const auto label = static_cast<std::size_t>(labels[n * plane + i]);
      loss += std::log(denom) - static_cast<double>(z[base + label * plane + i] - mx);
    }
  }
  const double count = static_cast<double>(batch * plane);
  std::vector<std::int32_t> saved(labels.begin(), labels.end());
  auto backward = [prob = std::move(prob), saved = std::move(saved), batch, classes, plane, count](
                      OpRecord<T>& rec, const TensorNode<T>& y) {
    auto& zin = *rec.inputs[0];
    const T g = static_cast<T>(y.grad[0] / count);
    for (std::size_t n = 0; n < batch; ++n) {
      const std::size_t base = n * classes * plane;
      for (std::size_t c = 0; c < classes; ++c) {
        for (std::size_t i = 0; i < plane; ++i) {
          const T onehot = static_cast<std::size_t>(saved[n * plane + i]) == c ? T{1} : T{0};
          zin.grad[base + c * plane + i] += g * (prob[base + c * plane + i] - onehot);
        }
      }
    }
  };
  return detail::record<T>(OpKind::kSoftmaxCrossEntropy, {1}, {static_cast<T>(loss / count)}, {logits},
                           std::move(backward));
}

template <typename T>
std::vector<std::uint8_t> argmax_channels(const Tensor<T>& logits) {
  require_rank4(logits, "argmax_channels", "logits");
  const auto& s = logits.shape();
  const std::size_t batch = s[0], classes = s[1], plane = s[2] * s[3];
  std::vector<std::uint8_t> out(batch * plane);
  const auto z = logits.values();
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t i = 0; i < plane; ++i) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < classes; ++c) {
        if (z[(n * classes + c) * plane + i] > z[(n * classes + best) * plane + i]) best = c;
      }
      out[n * plane + i] = static_cast<std::uint8_t>(best);
    }
  }
  return out;
}

#define LDNET_INSTANTIATE_OPS(T)                                                                          \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Conv2dGeometry);        \
  template Tensor<T> relu(const Tensor<T>&);                                                              \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                           \
  template Tensor<T> batchnorm2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, BatchNormStats<T>&, \
                                 Mode);                                                                   \
  template Tensor<T> maxpool2d(const Tensor<T>&);                                                         \
  template Tensor<T> upsample2x(const Tensor<T>&);                                                        \
  template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> slice_channels(const Tensor<T>&, std::size_t, std::size_t);                          \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                             \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                             \
  template Tensor<T> mul_broadcast_channels(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> mask_mul(const Tensor<T>&, std::vector<T>);                                          \
  template Tensor<T> scale(const Tensor<T>&, T);                                                          \
  template Tensor<T> sum(const Tensor<T>&);                                                               \
  template Tensor<T> weighted_sum(const Tensor<T>&, std::vector<T>);                                      \
  template Tensor<T> softmax_cross_entropy(const Tensor<T>&, std::span<const std::int32_t>);              \
  template std::vector<T> softmax_channels(const Tensor<T>&);                                             \
  template std::vector<std::uint8_t> argmax_channels(const Tensor<T>&);

LDNET_INSTANTIATE_OPS(float)
LDNET_INSTANTIATE_OPS(double)

#undef LDNET_INSTANTIATE_OPS

}  // namespace ldnet
