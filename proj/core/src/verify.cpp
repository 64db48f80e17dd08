#include "ldnet/verify.hpp"

#include <random>
#include <utility>

#include "ldnet/layers.hpp"
#include "ldnet/model.hpp"
#include "ldnet/random.hpp"

namespace ldnet {

namespace {

using T = double;
using Case = std::pair<std::function<Tensor<T>()>, NamedTensors<T>>;

class Suite {
 public:
  Suite(const GradientSuiteOptions& options, const std::function<void(const GradientSuiteRow&)>& on_row)
      : on_row_(on_row), rng_(derive_seed(options.seed, {0x6c})) {}

  Tensor<T> random(Shape shape, T lo = -1.0, T hi = 1.0) {
    std::uniform_real_distribution<T> dist(lo, hi);
    std::vector<T> v(numel(shape));
    for (auto& x : v) x = dist(rng_);
    return Tensor<T>(std::move(shape), std::move(v));
  }

  std::vector<T> weights(std::size_t n) {
    std::uniform_real_distribution<T> dist(0.5, 1.5);
    std::vector<T> w(n);
    for (auto& x : w) x = dist(rng_);
    return w;
  }

  std::vector<std::int32_t> labels(std::size_t n, std::size_t classes) {
    std::uniform_int_distribution<std::int32_t> dist(0, static_cast<std::int32_t>(classes) - 1);
    std::vector<std::int32_t> out(n);
    for (auto& l : out) l = dist(rng_);
    return out;
  }

  // Checks `y = op(inputs)` through a fixed random linear read-out, so every
  // output coordinate contributes with its own weight. The weights average
  // rather than sum so the read-out stays O(1): round-off in the central
  // difference scales with it, and coordinates whose true gradient is zero
  // are judged against the absolute denominator floor.
  Case reduced(std::function<Tensor<T>()> op, NamedTensors<T> wrt) {
    std::size_t outputs = 0;
    {
      NoGradGuard guard;
      outputs = op().numel();
    }
    auto w = weights(outputs);
    for (auto& x : w) x /= static_cast<T>(outputs);
    return {[op = std::move(op), w] { return weighted_sum(op(), w); }, std::move(wrt)};
  }

  void row(const std::string& name, double tolerance, const std::vector<Case>& cases,
           const GradCheckOptions& gc = {}) {
    GradientSuiteRow out{name, tolerance, {}};
    std::size_t checked = 0;
    for (const auto& [f, wrt] : cases) {
      const auto r = finite_difference_check<T>(f, wrt, gc);
      checked += r.coordinates_checked;
      if (out.result.worst_tensor.empty() || r.max_relative_error > out.result.max_relative_error) out.result = r;
    }
    out.result.coordinates_checked = checked;
    rows_.push_back(out);
    if (on_row_) on_row_(out);
  }

  std::vector<GradientSuiteRow> take() { return std::move(rows_); }

 private:
  const std::function<void(const GradientSuiteRow&)>& on_row_;
  std::mt19937_64 rng_;
  std::vector<GradientSuiteRow> rows_;
};

std::string name_of(OpKind kind) { return std::string(op_name(kind)); }

void primitive_rows(Suite& s, double tol) {
  {
    std::vector<Case> cases;
    const struct {
      Shape x, w;
      Conv2dGeometry g;
      bool bias;
    } geometries[] = {{{2, 3, 6, 6}, {4, 3, 3, 3}, {1, 1, 1}, true},
                      {{1, 2, 7, 7}, {3, 2, 3, 3}, {2, 0, 1}, true},
                      {{1, 2, 9, 9}, {2, 2, 3, 3}, {1, 2, 2}, false},
                      {{1, 1, 5, 5}, {2, 1, 1, 1}, {1, 0, 1}, true}};
    for (const auto& c : geometries) {
      auto x = s.random(c.x), w = s.random(c.w);
      auto b = c.bias ? s.random({c.w[0]}) : Tensor<T>{};
      NamedTensors<T> wrt{{"input", x}, {"kernel", w}};
      if (c.bias) wrt.emplace_back("bias", b);
      const auto g = c.g;
      cases.push_back(s.reduced([=] { return conv2d(x, w, b, g); }, wrt));
    }
    s.row(name_of(OpKind::kConv2d), tol, cases);
  }
  {
    auto x = s.random({2, 3, 4, 4});
    s.row(name_of(OpKind::kRelu), tol, {s.reduced([=] { return relu(x); }, {{"input", x}})});
  }
  {
    auto x = s.random({2, 3, 4, 4}, -3, 3);
    s.row(name_of(OpKind::kSigmoid), tol, {s.reduced([=] { return sigmoid(x); }, {{"input", x}})});
  }
  {
    std::vector<Case> cases;
    for (Mode mode : {Mode::kTrain, Mode::kEval}) {
      auto x = s.random({3, 2, 4, 4}, -2, 2);
      auto g = s.random({2}, 0.5, 1.5), b = s.random({2});
      auto stats = std::make_shared<BatchNormStats<T>>(BatchNormStats<T>::make(2));
      stats->running_mean = s.random({2});
      stats->running_var = s.random({2}, 0.5, 2.0);
      stats->batches_seen = Tensor<T>::ones({1});
      cases.push_back(s.reduced([=] { return batchnorm2d(x, g, b, *stats, mode); },
                                {{"input", x}, {"scale", g}, {"shift", b}}));
    }
    s.row(name_of(OpKind::kBatchNorm2d), tol, cases);
  }
  {
    auto x = s.random({2, 2, 6, 6});
    s.row(name_of(OpKind::kMaxPool2d), tol, {s.reduced([=] { return maxpool2d(x); }, {{"input", x}})});
  }
  {
    auto x = s.random({1, 2, 3, 4});
    s.row(name_of(OpKind::kUpsample2x), tol,
          {s.reduced([=] { return upsample2x(x); }, {{"input", x}})});
  }
  {
    auto a = s.random({2, 2, 3, 3}), b = s.random({2, 3, 3, 3});
    s.row(name_of(OpKind::kConcatChannels), tol,
          {s.reduced([=] { return concat_channels(a, b); }, {{"a", a}, {"b", b}})});
  }
  {
    auto x = s.random({2, 4, 3, 3});
    s.row(name_of(OpKind::kSliceChannels), tol,
          {s.reduced([=] { return slice_channels(x, 1, 2); }, {{"input", x}})});
  }
  {
    auto a = s.random({2, 3, 3, 3}), b = s.random({2, 3, 3, 3});
    s.row(name_of(OpKind::kAdd), tol, {s.reduced([=] { return add(a, b); }, {{"a", a}, {"b", b}})});
    s.row(name_of(OpKind::kMul), tol, {s.reduced([=] { return mul(a, b); }, {{"a", a}, {"b", b}})});
  }
  {
    auto x = s.random({2, 3, 4, 4}), a = s.random({2, 1, 4, 4});
    s.row(name_of(OpKind::kMulBroadcastChannels), tol,
          {s.reduced([=] { return mul_broadcast_channels(x, a); }, {{"x", x}, {"alpha", a}})});
  }
  {
    auto x = s.random({2, 3, 4, 4});
    std::vector<T> mask(x.numel());
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = (i * 7 % 3) ? 1.0 : 0.0;
    s.row(name_of(OpKind::kMaskMul), tol,
          {s.reduced([=] { return mask_mul(x, mask); }, {{"input", x}})});
  }
  {
    auto x = s.random({2, 3, 4});
    s.row(name_of(OpKind::kScale), tol, {s.reduced([=] { return scale(x, T{-1.75}); }, {{"input", x}})});
  }
  {
    auto x = s.random({2, 3, 4});
    s.row(name_of(OpKind::kSum), tol, {{[=] { return sum(x); }, {{"input", x}}}});
  }
  {
    auto x = s.random({2, 3, 4});
    auto w = s.weights(x.numel());
    s.row(name_of(OpKind::kWeightedSum), tol, {{[=] { return weighted_sum(x, w); }, {{"input", x}}}});
  }
  {
    std::vector<Case> cases;
    for (std::size_t classes : {2u, 5u}) {
      auto x = s.random({2, classes, 3, 4}, -3, 3);
      auto labels = s.labels(2 * 3 * 4, classes);
      cases.push_back({[=] { return softmax_cross_entropy(x, labels); }, {{"logits", x}}});
    }
    s.row(name_of(OpKind::kSoftmaxCrossEntropy), tol, cases);
  }
}

void layer_rows(Suite& s, double tol) {
  InitRng rng(3);
  {
    auto stack = std::make_shared<ConvStackParams<T>>(ConvStackParams<T>::make(2, 3, rng));
    stack->bn1.scale = s.random({3}, 0.5, 1.5);
    stack->bn2.shift = s.random({3});
    auto x = s.random({2, 2, 5, 5});
    ParamList<T> params;
    stack->collect("stack", params);
    NamedTensors<T> wrt{{"input", x}};
    for (const auto& p : params)
      if (p.trainable) wrt.emplace_back(p.name, p.tensor);
    s.row("conv_stack", tol,
          {s.reduced([=] { return conv_stack_forward(*stack, x, Mode::kTrain); }, wrt)});
  }
  {
    auto x = s.random({2, 3, 8, 8});
    s.row("dropblock", tol,
          {s.reduced([=] { return dropblock_apply(DropBlockConfig{3, 0.7, Mode::kTrain, 41}, x); }, {{"input", x}})});
  }
  {
    auto x = s.random({2, 4, 3, 3});
    s.row("spatial_dropout", tol,
          {s.reduced([=] { return spatial_dropout2d(x, 0.5, Mode::kTrain, 43); }, {{"input", x}})});
  }
  {
    auto aspp = AsppParams<T>::make(2, rng);
    auto x = s.random({1, 2, 6, 6});
    ParamList<T> params;
    aspp.collect("aspp", params);
    NamedTensors<T> wrt{{"input", x}};
    for (const auto& p : params) wrt.emplace_back(p.name, p.tensor);
    s.row("aspp", tol, {s.reduced([=] { return aspp_forward(aspp, x); }, wrt)});
  }
  {
    auto gate = AttentionGateParams<T>::make(4, 6, 2, rng);
    gate.b_g = s.random({2});
    auto x = s.random({2, 4, 3, 3}), g = s.random({2, 6, 3, 3});
    ParamList<T> params;
    gate.collect("gate", params);
    NamedTensors<T> wrt{{"skip", x}, {"gating", g}};
    for (const auto& p : params) wrt.emplace_back(p.name, p.tensor);
    s.row("attention_gate", tol, {s.reduced([=] { return attention_gate(gate, x, g).gated; }, wrt)});
  }
}

}  // namespace

std::vector<GradientSuiteRow> run_gradient_suite(const GradientSuiteOptions& options,
                                                 const std::function<void(const GradientSuiteRow&)>& on_row) {
  Suite s(options, on_row);
  primitive_rows(s, options.op_tolerance);
  layer_rows(s, options.op_tolerance);
  if (options.include_model) {
    LdnetConfig config;
    config.base_width = options.model_width;
    config.num_classes = options.model_classes;
    config.init_seed = derive_seed(options.seed, {0x3d});
    auto model = std::make_shared<Ldnet<T>>(config);
    model->set_keep_prob(0.9);
    const auto size = options.model_size;
    auto input = s.random({1, 1, size, size}, 0, 1);
    auto labels = s.labels(size * size, options.model_classes);
    NamedTensors<T> wrt{{"input", input}};
    for (const auto& p : model->trainable_parameters()) wrt.emplace_back(p.name, p.tensor);
    // Train mode with a fixed seed: batch statistics and frozen masks.
    const std::uint64_t mask_seed = derive_seed(options.seed, {0xd});
    GradCheckOptions gc;
    gc.max_coordinates_per_tensor = options.model_coordinates_per_tensor;
    gc.seed = options.seed;
    s.row("model", options.model_tolerance,
          {{[=] { return softmax_cross_entropy(model->forward(input, {Mode::kTrain, mask_seed}), labels); }, wrt}},
          gc);
  }
  return s.take();
}

}  // namespace ldnet
