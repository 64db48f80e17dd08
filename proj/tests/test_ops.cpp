#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "ldnet/gradcheck.hpp"
#include "ldnet/log.hpp"
#include "ldnet/ops.hpp"
#include "test_support.hpp"

namespace ldnet {
namespace {

using test::random_tensor;

std::vector<double> random_weights(std::size_t n, std::uint64_t seed) {
  return random_tensor({n}, seed).vector();
}

// Scalar probe: a random linear functional of the op output, so every output
// coordinate contributes a distinct upstream gradient.
template <typename F>
double check_op(F op, const NamedTensors<double>& inputs, std::uint64_t seed) {
  std::vector<double> w;
  auto f = [&]() {
    auto y = op();
    if (w.size() != y.numel()) w = random_weights(y.numel(), seed);
    return weighted_sum(y, w);
  };
  return finite_difference_check<double>(f, inputs).max_relative_error;
}

// --- conv2d -----------------------------------------------------------------

TEST(Conv2d, OneDimensionalAtrousExample) {
  Tensor<double> x(Shape{1, 1, 1, 5}, {1, 2, 3, 4, 5});
  Tensor<double> w(Shape{1, 1, 1, 1}, {1});
  // A 1x3 kernel is expressed as 3x3 with only the middle row set, on a 3-row input.
  Tensor<double> x3(Shape{1, 1, 5, 5}, 0.0);
  for (int i = 0; i < 5; ++i) x3.at(0, 0, 2, i) = i + 1;
  Tensor<double> k(Shape{1, 1, 3, 3}, 0.0);
  for (int i = 0; i < 3; ++i) k.at(0, 0, 1, i) = 1;
  auto y = conv2d(x3, k, Tensor<double>{}, {1, 0, 2});
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y.item(), 9.0);
}

TEST(Conv2d, EffectiveKernelExtent) {
  EXPECT_EQ(effective_kernel_extent(3, 2), 5);
  EXPECT_EQ(effective_kernel_extent(3, 1), 3);
  EXPECT_EQ(effective_kernel_extent(3, 32), 65);
}

TEST(Conv2d, ZeroKernelGivesBias) {
  auto x = random_tensor({2, 3, 6, 6}, 1);
  Tensor<double> k(Shape{4, 3, 3, 3}, 0.0);
  Tensor<double> b(Shape{4}, {0.5, -1, 2, 7});
  auto y = conv2d(x, k, b, {1, 1, 1});
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(y.at(n, c, i, j), b.values()[c]);
}

TEST(Conv2d, BitwiseEqualsReferenceLoops) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 24; ++trial) {
    const std::size_t n = 1 + rng() % 2, cin = 1 + rng() % 4, cout = 1 + rng() % 4;
    const std::size_t h = 3 + rng() % 14, w = 3 + rng() % 14;
    const std::size_t k = std::min<std::size_t>({1 + 2 * (rng() % 2), h, w});
    const int stride = 1 + static_cast<int>(rng() % 2);
    const int pad = static_cast<int>(rng() % 2);
    auto x = random_tensor({n, cin, h, w}, rng());
    auto kk = random_tensor({cout, cin, k, k}, rng());
    auto b = random_tensor({cout}, rng());
    const auto y = conv2d(x, kk, b, {stride, pad, 1});
    const auto ref = test::reference_conv(x, kk, &b, stride, pad, 1);
    ASSERT_EQ(y.numel(), ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_EQ(y.values()[i], ref[i]) << "trial " << trial << " i " << i;
  }
  // The largest admissible case.
  auto x = random_tensor({2, 4, 16, 16}, 99);
  auto kk = random_tensor({4, 4, 3, 3}, 98);
  auto b = random_tensor({4}, 97);
  const auto y = conv2d(x, kk, b, {1, 1, 1});
  const auto ref = test::reference_conv(x, kk, &b, 1, 1, 1);
  for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_EQ(y.values()[i], ref[i]);
}

TEST(Conv2d, AtrousEqualsZeroInsertedDense) {
  auto x = random_tensor({1, 1, 8, 8}, 21);
  auto k = random_tensor({1, 1, 3, 3}, 22);
  const auto dilated = conv2d(x, k, Tensor<double>{}, {1, 0, 3});
  const auto dense = conv2d(x, test::zero_insert(k, 3), Tensor<double>{}, {1, 0, 1});
  ASSERT_EQ(dilated.shape(), dense.shape());
  EXPECT_LT(test::max_abs_diff(dilated.values(), dense.values()), 1e-10);

  for (int r : {2, 4, 8, 16, 32}) {
    auto xi = random_tensor({1, 2, 40, 40}, 30 + r);
    auto ki = random_tensor({3, 2, 3, 3}, 60 + r);
    const auto a = conv2d(xi, ki, Tensor<double>{}, {1, r, r});
    const auto d = conv2d(xi, test::zero_insert(ki, r), Tensor<double>{}, {1, r, 1});
    EXPECT_LT(test::max_abs_diff(a.values(), d.values()), 1e-10) << "rate " << r;
  }
}

TEST(Conv2d, Errors) {
  auto x = random_tensor({1, 3, 8, 8}, 1);
  try {
    conv2d(x, random_tensor({2, 2, 3, 3}, 2), Tensor<double>{}, {});
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("channel"), std::string::npos);
  }
  EXPECT_THROW(conv2d(x, random_tensor({2, 3, 3, 3}, 2), Tensor<double>{}, {1, 0, 5}), std::invalid_argument);
  EXPECT_THROW(conv2d(x, random_tensor({2, 3, 3, 3}, 2), Tensor<double>{}, {1, 0, 0}), std::invalid_argument);
  EXPECT_THROW(conv2d(x, random_tensor({2, 3, 3, 3}, 2), random_tensor({3}, 3), {}), std::invalid_argument);
}

TEST(Conv2d, GradientAcrossGeometries) {
  struct Case {
    Shape x, k;
    Conv2dGeometry g;
  };
  const Case cases[] = {
      {{1, 2, 5, 5}, {3, 2, 3, 3}, {1, 1, 1}},
      {{2, 1, 7, 6}, {2, 1, 3, 3}, {2, 1, 1}},
      {{1, 2, 9, 9}, {2, 2, 3, 3}, {1, 2, 2}},
      {{1, 1, 6, 6}, {2, 1, 1, 1}, {1, 0, 1}},
  };
  std::uint64_t seed = 100;
  for (const auto& c : cases) {
    auto x = random_tensor(c.x, ++seed);
    auto k = random_tensor(c.k, ++seed);
    auto b = random_tensor({c.k[0]}, ++seed);
    const double err = check_op([&] { return conv2d(x, k, b, c.g); }, {{"x", x}, {"k", k}, {"b", b}}, ++seed);
    EXPECT_LT(err, 1e-4) << to_string(c.x);
  }
}

// --- elementwise --------------------------------------------------------------

TEST(Relu, Examples) {
  Tensor<double> x(Shape{3}, {-1, 0, 2});
  EXPECT_EQ(relu(x).vector(), (std::vector<double>{0, 0, 2}));
  auto p = random_tensor({10}, 1, 0.1, 1);
  EXPECT_EQ(relu(p).vector(), p.vector());
  Tensor<double> g(Shape{2}, {-1, 2}, true);
  sum(relu(g)).backward();
  EXPECT_EQ(std::vector<double>(g.grad().begin(), g.grad().end()), (std::vector<double>{0, 1}));
}

TEST(Sigmoid, Examples) {
  EXPECT_EQ(sigmoid(Tensor<double>::scalar(0)).item(), 0.5);
  auto x = random_tensor({50}, 2, -30, 30);
  const auto a = sigmoid(x), b = sigmoid(scale(x, -1.0));
  for (std::size_t i = 0; i < 50; ++i) {
    EXPECT_NEAR(a.values()[i] + b.values()[i], 1.0, 1e-15);
    EXPECT_GT(a.values()[i], 0.0);
    EXPECT_LT(a.values()[i], 1.0);
  }
  auto z = Tensor<double>(Shape{1}, 0.0, true);
  sigmoid(z).backward();
  EXPECT_NEAR(z.grad()[0], 0.25, 1e-15);
  const auto fd = finite_difference_check<double>([&] { return sigmoid(z); }, z);
  EXPECT_LT(fd.max_relative_error, 1e-8);
  // No overflow in the saturated tails.
  Tensor<double> big(Shape{2}, {-800, 800});
  EXPECT_EQ(sigmoid(big).vector(), (std::vector<double>{0.0, 1.0}));
}

TEST(ElementwiseOps, Gradients) {
  const Shape shapes[] = {{1, 1, 3, 3}, {2, 3, 4, 5}, {1, 4, 2, 6}};
  std::uint64_t seed = 200;
  for (const auto& s : shapes) {
    auto a = random_tensor(s, ++seed), b = random_tensor(s, ++seed);
    EXPECT_LT(check_op([&] { return relu(a); }, {{"a", a}}, ++seed), 1e-4);
    EXPECT_LT(check_op([&] { return sigmoid(a); }, {{"a", a}}, ++seed), 1e-4);
    EXPECT_LT(check_op([&] { return add(a, b); }, {{"a", a}, {"b", b}}, ++seed), 1e-4);
    EXPECT_LT(check_op([&] { return mul(a, b); }, {{"a", a}, {"b", b}}, ++seed), 1e-4);
    EXPECT_LT(check_op([&] { return scale(a, 2.5); }, {{"a", a}}, ++seed), 1e-4);
    auto mask = random_weights(a.numel(), ++seed);
    EXPECT_LT(check_op([&] { return mask_mul(a, mask); }, {{"a", a}}, ++seed), 1e-4);
    auto alpha = random_tensor({s[0], 1, s[2], s[3]}, ++seed);
    EXPECT_LT(check_op([&] { return mul_broadcast_channels(a, alpha); }, {{"a", a}, {"alpha", alpha}}, ++seed),
              1e-4);
    EXPECT_LT(finite_difference_check<double>([&] { return sum(mul(a, a)); }, a).max_relative_error, 1e-8);
  }
}

// --- batch norm ----------------------------------------------------------------

TEST(BatchNorm, TrainModeNormalizes) {
  auto x = random_tensor({2, 3, 4, 4}, 300, -2, 5);
  auto stats = BatchNormStats<double>::make(3);
  auto y = batchnorm2d(x, Tensor<double>::ones({3}), Tensor<double>::zeros({3}), stats, Mode::kTrain);
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0;
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t i = 0; i < 16; ++i) m += y.values()[(n * 3 + c) * 16 + i];
    EXPECT_LT(std::abs(m / 32), 1e-6);
  }
  Tensor<double> g(Shape{3}, 2.0), s(Shape{3}, 3.0);
  auto z = batchnorm2d(x, g, s, stats, Mode::kTrain);
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0, v = 0;
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t i = 0; i < 16; ++i) m += z.values()[(n * 3 + c) * 16 + i];
    m /= 32;
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t i = 0; i < 16; ++i) v += std::pow(z.values()[(n * 3 + c) * 16 + i] - m, 2);
    EXPECT_NEAR(m, 3.0, 1e-5);
    EXPECT_NEAR(std::sqrt(v / 32), 2.0, 1e-5);
  }
}

TEST(BatchNorm, RunningStatsFollowMomentum) {
  auto x = random_tensor({4, 1, 3, 3}, 301, 1, 3);
  auto stats = BatchNormStats<double>::make(1);
  batchnorm2d(x, Tensor<double>::ones({1}), Tensor<double>::zeros({1}), stats, Mode::kTrain);
  const double mean = std::accumulate(x.values().begin(), x.values().end(), 0.0) / 36;
  double ss = 0;
  for (double v : x.values()) ss += (v - mean) * (v - mean);
  EXPECT_NEAR(stats.running_mean.values()[0], 0.1 * mean, 1e-12);
  EXPECT_NEAR(stats.running_var.values()[0], 0.9 + 0.1 * ss / 35, 1e-12);
  EXPECT_EQ(stats.batches_seen.values()[0], 1.0);
  // Eval mode uses exactly the running statistics.
  auto e = batchnorm2d(x, Tensor<double>::ones({1}), Tensor<double>::zeros({1}), stats, Mode::kEval);
  const double expected = (x.values()[5] - stats.running_mean.values()[0]) /
                          std::sqrt(stats.running_var.values()[0] + kBatchNormEps);
  EXPECT_NEAR(e.values()[5], expected, 1e-12);
}

TEST(BatchNorm, EvalBeforeTrainingIsFlagged) {
  std::vector<std::string> lines;
  forget_warnings();
  auto previous = set_log_sink([&](std::string_view m) { lines.emplace_back(m); });
  auto stats = BatchNormStats<double>::make(2);
  auto x = random_tensor({1, 2, 2, 2}, 302);
  auto y = batchnorm2d(x, Tensor<double>::ones({2}), Tensor<double>::zeros({2}), stats, Mode::kEval);
  set_log_sink(previous);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y.values()[i], x.values()[i] / std::sqrt(1 + 1e-5), 1e-15);
  EXPECT_FALSE(lines.empty());
}

TEST(BatchNorm, Gradient) {
  const Shape shapes[] = {{2, 3, 4, 4}, {1, 2, 3, 5}, {3, 1, 2, 2}};
  std::uint64_t seed = 310;
  for (const auto& s : shapes) {
    auto x = random_tensor(s, ++seed, -2, 2);
    auto g = random_tensor({s[1]}, ++seed, 0.5, 1.5);
    auto b = random_tensor({s[1]}, ++seed);
    auto stats = BatchNormStats<double>::make(s[1]);
    EXPECT_LT(check_op([&] { return batchnorm2d(x, g, b, stats, Mode::kTrain); },
                       {{"x", x}, {"scale", g}, {"shift", b}}, ++seed),
              1e-4);
    EXPECT_LT(check_op([&] { return batchnorm2d(x, g, b, stats, Mode::kEval); },
                       {{"x", x}, {"scale", g}, {"shift", b}}, ++seed),
              1e-4);
  }
}

TEST(BatchNorm, RejectsSingleValueTrainBatch) {
  auto stats = BatchNormStats<double>::make(1);
  EXPECT_THROW(batchnorm2d(random_tensor({1, 1, 1, 1}, 1), Tensor<double>::ones({1}), Tensor<double>::zeros({1}),
                           stats, Mode::kTrain),
               std::invalid_argument);
}

// --- pooling / resampling ---------------------------------------------------------

TEST(MaxPool, Examples) {
  Tensor<double> x(Shape{1, 1, 2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(maxpool2d(x).vector(), (std::vector<double>{4}));
  Tensor<double> c(Shape{1, 1, 4, 4}, 3.0, true);
  auto y = maxpool2d(c);
  for (double v : y.values()) EXPECT_EQ(v, 3.0);
  sum(y).backward();
  // Ties go to the first element of each window.
  const std::vector<double> expected{1, 0, 1, 0, 0, 0, 0, 0, 1, 0, 1, 0, 0, 0, 0, 0};
  EXPECT_EQ(std::vector<double>(c.grad().begin(), c.grad().end()), expected);
  EXPECT_THROW(maxpool2d(Tensor<double>(Shape{1, 1, 3, 4})), std::invalid_argument);
}

TEST(MaxPool, Gradient) {
  const Shape shapes[] = {{1, 2, 4, 4}, {2, 1, 6, 2}, {1, 3, 2, 8}};
  std::uint64_t seed = 400;
  for (const auto& s : shapes) {
    auto x = random_tensor(s, ++seed);
    EXPECT_LT(check_op([&] { return maxpool2d(x); }, {{"x", x}}, ++seed), 1e-4);
  }
}

TEST(Upsample, Examples) {
  Tensor<double> c(Shape{1, 2, 3, 3}, 1.75);
  auto uc = upsample2x(c);
  EXPECT_EQ(uc.shape(), (Shape{1, 2, 6, 6}));
  for (double v : uc.values()) EXPECT_EQ(v, 1.75);
  Tensor<double> r(Shape{1, 1, 1, 2}, {0, 1});
  EXPECT_EQ(upsample2x(r).vector(), (std::vector<double>{0, 0.25, 0.75, 1, 0, 0.25, 0.75, 1}));
}

TEST(Upsample, AveragePoolRecoversInterior) {
  // Exact for affine content: each 2x2 output block averages to the source value.
  Tensor<double> x(Shape{1, 1, 6, 6});
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j) x.at(0, 0, i, j) = 0.3 * i - 0.7 * j + 2;
  auto u = upsample2x(x);
  for (std::size_t i = 1; i < 5; ++i)
    for (std::size_t j = 1; j < 5; ++j) {
      const double avg = (u.at(0, 0, 2 * i, 2 * j) + u.at(0, 0, 2 * i + 1, 2 * j) + u.at(0, 0, 2 * i, 2 * j + 1) +
                          u.at(0, 0, 2 * i + 1, 2 * j + 1)) / 4;
      EXPECT_NEAR(avg, x.at(0, 0, i, j), 1e-6);
    }
}

TEST(Upsample, Gradient) {
  const Shape shapes[] = {{1, 1, 3, 3}, {2, 2, 2, 4}, {1, 3, 5, 1}};
  std::uint64_t seed = 500;
  for (const auto& s : shapes) {
    auto x = random_tensor(s, ++seed);
    EXPECT_LT(check_op([&] { return upsample2x(x); }, {{"x", x}}, ++seed), 1e-4);
  }
}

// --- channel plumbing ---------------------------------------------------------------

TEST(Concat, ShapesAndRoundTrip) {
  auto a = random_tensor({1, 2, 8, 8}, 1), b = random_tensor({1, 3, 8, 8}, 2);
  EXPECT_EQ(concat_channels(a, b).shape(), (Shape{1, 5, 8, 8}));
  auto c = concat_channels(a, Tensor<double>::zeros({1, 4, 8, 8}));
  EXPECT_EQ(slice_channels(c, 0, 2).vector(), a.vector());
  EXPECT_THROW(concat_channels(a, random_tensor({1, 3, 8, 4}, 3)), std::invalid_argument);
}

TEST(Concat, Gradient) {
  const std::pair<Shape, Shape> shapes[] = {{{1, 2, 3, 3}, {1, 1, 3, 3}}, {{2, 1, 2, 2}, {2, 3, 2, 2}},
                                            {{1, 3, 4, 1}, {1, 2, 4, 1}}};
  std::uint64_t seed = 600;
  for (const auto& [sa, sb] : shapes) {
    auto a = random_tensor(sa, ++seed), b = random_tensor(sb, ++seed);
    EXPECT_LT(check_op([&] { return concat_channels(a, b); }, {{"a", a}, {"b", b}}, ++seed), 1e-6);
    EXPECT_LT(check_op([&] { return slice_channels(concat_channels(a, b), 1, sa[1]); }, {{"a", a}, {"b", b}}, ++seed),
              1e-6);
  }
}

// --- loss --------------------------------------------------------------------------

TEST(SoftmaxCrossEntropy, UniformLogits) {
  Tensor<double> logits(Shape{2, 5, 3, 3}, 0.7);
  std::vector<std::int32_t> labels(18);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<std::int32_t>(i % 5);
  EXPECT_NEAR(softmax_cross_entropy(logits, labels).item(), std::log(5.0), 1e-12);
}

TEST(SoftmaxCrossEntropy, MarginDrivesLossToZero) {
  double previous = 1e9;
  for (double margin : {1.0, 5.0, 20.0, 50.0}) {
    Tensor<double> logits(Shape{1, 3, 1, 2}, 0.0);
    logits.at(0, 1, 0, 0) = margin;
    logits.at(0, 2, 0, 1) = margin;
    const double loss = softmax_cross_entropy(logits, std::vector<std::int32_t>{1, 2}).item();
    EXPECT_LT(loss, previous);
    previous = loss;
  }
  EXPECT_LT(previous, 1e-20);
  // Stable for huge logits.
  Tensor<double> huge(Shape{1, 2, 1, 1}, {1000.0, -1000.0});
  EXPECT_TRUE(std::isfinite(softmax_cross_entropy(huge, std::vector<std::int32_t>{1}).item()));
}

TEST(SoftmaxCrossEntropy, GradientIsSoftmaxMinusOneHot) {
  auto logits = random_tensor({2, 4, 3, 2}, 700, -3, 3, true);
  std::vector<std::int32_t> labels(12);
  std::mt19937 rng(1);
  for (auto& l : labels) l = static_cast<std::int32_t>(rng() % 4);
  softmax_cross_entropy(logits, labels).backward();
  const auto p = softmax_channels(logits);
  const std::size_t pixels = 6;
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t i = 0; i < pixels; ++i) {
        const std::size_t idx = (n * 4 + c) * pixels + i;
        const double onehot = labels[n * pixels + i] == static_cast<std::int32_t>(c) ? 1.0 : 0.0;
        EXPECT_NEAR(logits.grad()[idx], (p[idx] - onehot) / 12.0, 1e-15);
      }
  const Shape shapes[] = {{2, 4, 3, 2}, {1, 2, 4, 4}, {3, 5, 1, 2}};
  std::uint64_t seed = 710;
  for (const auto& s : shapes) {
    auto x = random_tensor(s, ++seed, -3, 3);
    std::vector<std::int32_t> lab(s[0] * s[2] * s[3]);
    for (auto& l : lab) l = static_cast<std::int32_t>(rng() % s[1]);
    const auto r = finite_difference_check<double>([&] { return softmax_cross_entropy(x, lab); }, x);
    EXPECT_LT(r.max_relative_error, 1e-4);
  }
}

TEST(SoftmaxCrossEntropy, DistributionRowsSumToOne) {
  auto logits = random_tensor({2, 5, 4, 4}, 720, -40, 40);
  const auto p = softmax_channels(logits);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 16; ++i) {
      double s = 0;
      for (std::size_t c = 0; c < 5; ++c) s += p[(n * 5 + c) * 16 + i];
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
}

TEST(SoftmaxCrossEntropy, OutOfRangeLabelNamesPixel) {
  Tensor<double> logits(Shape{1, 3, 2, 2});
  try {
    softmax_cross_entropy(logits, std::vector<std::int32_t>{0, 1, 2, 3});
    FAIL();
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("(n=0, y=1, x=1)"), std::string::npos) << msg;
  }
}

TEST(Argmax, PicksLargestChannel) {
  Tensor<double> logits(Shape{1, 3, 1, 3}, {0, 5, 1, 2, 0, 1, 1, 0, 7});
  EXPECT_EQ(argmax_channels(logits), (std::vector<std::uint8_t>{1, 0, 2}));
}

TEST(Reductions, Gradients) {
  auto x = random_tensor({2, 3, 2, 2}, 800);
  auto w = random_weights(x.numel(), 801);
  EXPECT_LT(finite_difference_check<double>([&] { return weighted_sum(x, w); }, x).max_relative_error, 1e-6);
  EXPECT_LT(finite_difference_check<double>([&] { return sum(mul(x, x)); }, x).max_relative_error, 1e-8);
}

}  // namespace
}  // namespace ldnet
