#include "ldnet/layers.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ldnet {

template <typename T>
Tensor<T> he_normal(Shape shape, InitRng& rng) {
  std::size_t fan_in = 1;
  for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  std::vector<T> values(numel(shape));
  for (auto& v : values) v = static_cast<T>(dist(rng));
  return Tensor<T>(std::move(shape), std::move(values), true);
}

template <typename T>
Conv2dParams<T> Conv2dParams<T>::make(std::size_t cin, std::size_t cout, std::size_t k, bool with_bias,
                                      InitRng& rng) {
  Conv2dParams p;
  p.weight = he_normal<T>({cout, cin, k, k}, rng);
  if (with_bias) p.bias = Tensor<T>::zeros({cout}, true);
  return p;
}

template <typename T>
void Conv2dParams<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  out.push_back({prefix + ".weight", weight, true});
  if (bias.defined()) out.push_back({prefix + ".bias", bias, true});
}

template <typename T>
BatchNormParams<T> BatchNormParams<T>::make(std::size_t channels) {
  return {Tensor<T>::ones({channels}, true), Tensor<T>::zeros({channels}, true),
          BatchNormStats<T>::make(channels)};
}

template <typename T>
void BatchNormParams<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  out.push_back({prefix + ".scale", scale, true});
  out.push_back({prefix + ".shift", shift, true});
  out.push_back({prefix + ".running_mean", stats.running_mean, false});
  out.push_back({prefix + ".running_var", stats.running_var, false});
  out.push_back({prefix + ".batches_seen", stats.batches_seen, false});
}

template <typename T>
ConvStackParams<T> ConvStackParams<T>::make(std::size_t cin, std::size_t cout, InitRng& rng) {
  ConvStackParams p;
  p.in_channels = cin;
  p.out_channels = cout;
  p.conv1 = Conv2dParams<T>::make(cin, cout, 3, true, rng);
  p.bn1 = BatchNormParams<T>::make(cout);
  p.conv2 = Conv2dParams<T>::make(cout, cout, 3, true, rng);
  p.bn2 = BatchNormParams<T>::make(cout);
  return p;
}

template <typename T>
void ConvStackParams<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  conv1.collect(prefix + ".conv1", out);
  bn1.collect(prefix + ".bn1", out);
  conv2.collect(prefix + ".conv2", out);
  bn2.collect(prefix + ".bn2", out);
}

std::size_t conv_stack_param_count(std::size_t cin, std::size_t cout) {
  return 9 * cin * cout + cout + 9 * cout * cout + cout + 4 * cout;
}

template <typename T>
Tensor<T> conv_stack_forward(ConvStackParams<T>& params, const Tensor<T>& input, Mode mode) {
  if (input.rank() != 4 || input.dim(1) != params.in_channels) {
    throw std::invalid_argument("conv stack expects " + std::to_string(params.in_channels) +
                                " input channels, got shape " + to_string(input.shape()));
  }
  const Conv2dGeometry same{1, 1, 1};
  auto h = conv2d(input, params.conv1.weight, params.conv1.bias, same);
  h = batchnorm2d(h, params.bn1.scale, params.bn1.shift, params.bn1.stats, mode);
  h = conv2d(h, params.conv2.weight, params.conv2.bias, same);
  h = batchnorm2d(h, params.bn2.scale, params.bn2.shift, params.bn2.stats, mode);
  return relu(h);
}

double dropblock_gamma(double keep_prob, int block_size, int feat) {
  if (!(keep_prob >= 0.0 && keep_prob <= 1.0)) {
    throw std::invalid_argument("dropblock_gamma: keep probability " + std::to_string(keep_prob) +
                                " outside [0,1]");
  }
  if (block_size < 1) throw std::invalid_argument("dropblock_gamma: block size must be positive");
  if (feat < block_size) {
    throw std::invalid_argument("dropblock_gamma: feature map size " + std::to_string(feat) +
                                " is smaller than block size " + std::to_string(block_size));
  }
  const double bs = block_size;
  const double f = feat;
  const double valid = f - bs + 1.0;
  const double gamma = (1.0 - keep_prob) / (bs * bs) * (f * f) / (valid * valid);
  return std::clamp(gamma, 0.0, 1.0);
}

std::vector<std::uint8_t> dropblock_mask(std::size_t planes, std::size_t height, std::size_t width,
                                         int block_size, double gamma, std::uint64_t seed) {
  const auto bs = static_cast<std::size_t>(block_size);
  if (height < bs || width < bs) {
    throw std::invalid_argument("dropblock: map " + std::to_string(height) + "x" + std::to_string(width) +
                                " smaller than block size " + std::to_string(block_size));
  }
  std::vector<std::uint8_t> mask(planes * height * width, 1);
  if (gamma <= 0.0) return mask;
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution draw(std::min(gamma, 1.0));
  const std::size_t half = bs / 2;
  // Centers in [half, extent - (bs - half)] keep the whole square inside.
  const std::size_t rows = height - bs + 1;
  const std::size_t cols = width - bs + 1;
  for (std::size_t p = 0; p < planes; ++p) {
    std::uint8_t* m = mask.data() + p * height * width;
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        if (!draw(rng)) continue;
        // Square centered on (r + half, c + half).
        for (std::size_t i = r; i < r + bs; ++i) std::fill_n(m + i * width + c, bs, std::uint8_t{0});
      }
    }
  }
  return mask;
}

template <typename T>
Tensor<T> dropblock_apply(const DropBlockConfig& config, const Tensor<T>& input) {
  if (config.mode == Mode::kEval) return input;
  if (input.rank() != 4) throw std::invalid_argument("dropblock expects NCHW input, got " + to_string(input.shape()));
  const auto& s = input.shape();
  const double gamma = dropblock_gamma(config.keep_prob, config.block_size, static_cast<int>(std::min(s[2], s[3])));
  if (gamma <= 0.0) return input;
  const auto mask = dropblock_mask(s[0] * s[1], s[2], s[3], config.block_size, gamma, config.seed);
  std::size_t ones = 0;
  for (auto m : mask) ones += m;
  const T factor = ones ? static_cast<T>(static_cast<double>(mask.size()) / static_cast<double>(ones)) : T{0};
  std::vector<T> scaled(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) scaled[i] = mask[i] ? factor : T{0};
  return mask_mul(input, std::move(scaled));
}

template <typename T>
Tensor<T> spatial_dropout2d(const Tensor<T>& input, double p, Mode mode, std::uint64_t seed) {
  if (!(p >= 0.0 && p < 1.0)) throw std::invalid_argument("spatial_dropout2d: p must lie in [0,1)");
  if (mode == Mode::kEval || p == 0.0) return input;
  if (input.rank() != 4) throw std::invalid_argument("spatial_dropout2d expects NCHW input");
  const auto& s = input.shape();
  const std::size_t planes = s[0] * s[1], plane = s[2] * s[3];
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution drop(p);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> mask(input.numel());
  for (std::size_t c = 0; c < planes; ++c) {
    const T v = drop(rng) ? T{0} : keep_scale;
    std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>(c * plane), plane, v);
  }
  return mask_mul(input, std::move(mask));
}

template <typename T>
AsppParams<T> AsppParams<T>::make(std::size_t channels, InitRng& rng) {
  AsppParams p;
  p.channels = channels;
  for (auto& b : p.branches) b = Conv2dParams<T>::make(channels, channels, 3, true, rng);
  return p;
}

template <typename T>
void AsppParams<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  for (std::size_t i = 0; i < branches.size(); ++i) {
    branches[i].collect(prefix + ".rate" + std::to_string(kAsppRates[i]), out);
  }
}

template <typename T>
Tensor<T> aspp_forward(const AsppParams<T>& params, const Tensor<T>& input) {
  if (input.rank() != 4 || input.dim(1) != params.channels) {
    throw std::invalid_argument("aspp expects " + std::to_string(params.channels) + " channels, got shape " +
                                (input.defined() ? to_string(input.shape()) : std::string("undefined")));
  }
  Tensor<T> total;
  for (std::size_t i = 0; i < kAsppRates.size(); ++i) {
    const int r = kAsppRates[i];
    auto branch = conv2d(input, params.branches[i].weight, params.branches[i].bias, {1, same_padding(3, r), r});
    total = total.defined() ? add(total, branch) : branch;
  }
  return total;
}

template <typename T>
AttentionGateParams<T> AttentionGateParams<T>::make(std::size_t f_l, std::size_t f_g, std::size_t f_int,
                                                    InitRng& rng) {
  AttentionGateParams p;
  p.f_l = f_l;
  p.f_g = f_g;
  p.f_int = f_int;
  p.w_x = he_normal<T>({f_int, f_l, 1, 1}, rng);
  p.w_g = he_normal<T>({f_int, f_g, 1, 1}, rng);
  p.b_g = Tensor<T>::zeros({f_int}, true);
  p.psi = he_normal<T>({1, f_int, 1, 1}, rng);
  p.b_psi = Tensor<T>::zeros({1}, true);
  return p;
}

template <typename T>
void AttentionGateParams<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  out.push_back({prefix + ".w_x", w_x, true});
  out.push_back({prefix + ".w_g", w_g, true});
  out.push_back({prefix + ".b_g", b_g, true});
  out.push_back({prefix + ".psi", psi, true});
  out.push_back({prefix + ".b_psi", b_psi, true});
}

std::size_t attention_gate_param_count(std::size_t f_l, std::size_t f_g, std::size_t f_int) {
  return f_l * f_int + f_g * f_int + f_int + f_int + 1;
}

template <typename T>
GateOutput<T> attention_gate(const AttentionGateParams<T>& params, const Tensor<T>& x_skip, const Tensor<T>& g) {
  if (x_skip.rank() != 4 || g.rank() != 4) throw std::invalid_argument("attention gate expects NCHW inputs");
  if (x_skip.dim(0) != g.dim(0) || x_skip.dim(2) != g.dim(2) || x_skip.dim(3) != g.dim(3)) {
    throw std::invalid_argument("attention gate: spatial mismatch between skip " + to_string(x_skip.shape()) +
                                " and gating signal " + to_string(g.shape()));
  }
  auto q = add(conv2d(x_skip, params.w_x, Tensor<T>{}, {}), conv2d(g, params.w_g, params.b_g, {}));
  auto alpha = sigmoid(conv2d(relu(q), params.psi, params.b_psi, {}));
  return {mul_broadcast_channels(x_skip, alpha), alpha};
}

#define LDNET_INSTANTIATE_LAYERS(T)                                                               \
  template Tensor<T> he_normal<T>(Shape, InitRng&);                                               \
  template struct Conv2dParams<T>;                                                                \
  template struct BatchNormParams<T>;                                                             \
  template struct ConvStackParams<T>;                                                             \
  template struct AsppParams<T>;                                                                  \
  template struct AttentionGateParams<T>;                                                         \
  template Tensor<T> conv_stack_forward(ConvStackParams<T>&, const Tensor<T>&, Mode);             \
  template Tensor<T> dropblock_apply(const DropBlockConfig&, const Tensor<T>&);                   \
  template Tensor<T> spatial_dropout2d(const Tensor<T>&, double, Mode, std::uint64_t);            \
  template Tensor<T> aspp_forward(const AsppParams<T>&, const Tensor<T>&);                        \
  template GateOutput<T> attention_gate(const AttentionGateParams<T>&, const Tensor<T>&, const Tensor<T>&);

LDNET_INSTANTIATE_LAYERS(float)
LDNET_INSTANTIATE_LAYERS(double)

#undef LDNET_INSTANTIATE_LAYERS

}  // namespace ldnet
