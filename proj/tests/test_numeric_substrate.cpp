#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "sase/gradcheck.hpp"
#include "sase/nn.hpp"
#include "sase/ops.hpp"
#include "test_util.hpp"

using namespace sase;
using sase::testing::project;
using sase::testing::random_tensor;
using V = Var<double>;
using Opt = std::optional<V>;

namespace {

V cst(Shape s, std::vector<double> v) { return V::constant(Tensor<double>(s, std::move(v))); }

// 1x1x3x3 all-ones image, 3x3 all-ones kernel, zero "same" padding: each
// output counts the in-bounds taps of its 3x3 neighbourhood.
std::vector<double> ones_conv_oracle() {
  std::vector<double> out;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      int cnt = 0;
      for (int di = -1; di <= 1; ++di)
        for (int dj = -1; dj <= 1; ++dj)
          if (i + di >= 0 && i + di < 3 && j + dj >= 0 && j + dj < 3) ++cnt;
      out.push_back(cnt);
    }
  return out;
}

}  // namespace

TEST(Conv2d, ScalarKernelScales) {
  auto y = conv2d(cst({1, 1, 2, 2}, {1, 2, 3, 4}), cst({1, 1, 1, 1}, {2}), Opt(cst({1, 1, 1, 1}, {0})), {});
  EXPECT_EQ(y.value().storage(), (std::vector<double>{2, 4, 6, 8}));
}

TEST(Conv2d, ZeroKernelGivesBias) {
  auto x = V::constant(random_tensor({2, 3, 5, 4}, 1));
  auto y = conv2d(x, V::constant(Tensor<double>({1, 3, 3, 3})), Opt(cst({1, 1, 1, 1}, {0.5})),
                  Conv2dOptions::same(3, 3));
  EXPECT_EQ(y.shape(), (Shape{2, 1, 5, 4}));
  for (double v : y.value().storage()) EXPECT_EQ(v, 0.5);
}

TEST(Conv2d, OnesKernelCountsNeighbours) {
  auto y = conv2d(V::constant(Tensor<double>({1, 1, 3, 3}, 1.0)), V::constant(Tensor<double>({1, 1, 3, 3}, 1.0)),
                  std::nullopt, Conv2dOptions::same(3, 3));
  EXPECT_EQ(y.value().storage(), ones_conv_oracle());
  EXPECT_EQ(y.value().storage(), (std::vector<double>{4, 6, 4, 6, 9, 6, 4, 6, 4}));
}

TEST(Conv2d, RejectsBadGroups) {
  auto x = V::constant(Tensor<double>({1, 3, 4, 4}));
  EXPECT_THROW(conv2d(x, V::constant(Tensor<double>({2, 1, 1, 1})), std::nullopt, Conv2dOptions{1, 1, 0, 0, 2}),
               Error);
  EXPECT_THROW(conv2d(x, V::constant(Tensor<double>({2, 2, 1, 1})), std::nullopt, {}), Error);
  EXPECT_THROW(Conv2dOptions::same(2, 3), Error);
}

TEST(Conv2d, StridedMatchesDirectSum) {
  const auto xt = random_tensor({2, 4, 7, 6}, 3);
  const auto wt = random_tensor({6, 2, 3, 2}, 4);
  Conv2dOptions opt{2, 1, 1, 0, 2};
  auto y = conv2d(V::constant(xt), V::constant(wt), std::nullopt, opt);
  ASSERT_EQ(y.shape(), (Shape{2, 6, 4, 5}));
  for (int n = 0; n < 2; ++n)
    for (int oc = 0; oc < 6; ++oc)
      for (int oh = 0; oh < 4; ++oh)
        for (int ow = 0; ow < 5; ++ow) {
          double acc = 0;
          const int g = oc / 3;
          for (int icl = 0; icl < 2; ++icl)
            for (int kh = 0; kh < 3; ++kh)
              for (int kw = 0; kw < 2; ++kw) {
                const int ih = oh * 2 - 1 + kh, iw = ow + kw;
                if (ih < 0 || ih >= 7 || iw < 0 || iw >= 6) continue;
                acc += wt.at(oc, icl, kh, kw) * xt.at(n, g * 2 + icl, ih, iw);
              }
          EXPECT_NEAR(y.value().at(n, oc, oh, ow), acc, 1e-12);
        }
}

TEST(Conv1d, Examples) {
  auto identity = conv1d(cst({1, 1, 1, 3}, {1, 2, 3}), cst({1, 1, 1, 3}, {0, 1, 0}), Opt(cst({1, 1, 1, 1}, {0})));
  EXPECT_EQ(identity.value().storage(), (std::vector<double>{1, 2, 3}));
  auto box = conv1d(cst({1, 1, 1, 3}, {1, 2, 3}), cst({1, 1, 1, 3}, {1, 1, 1}), Opt(cst({1, 1, 1, 1}, {0})));
  EXPECT_EQ(box.value().storage(), (std::vector<double>{3, 6, 5}));
  auto bias = conv1d(cst({1, 1, 1, 3}, {1, 2, 3}), cst({1, 1, 1, 5}, {0, 0, 0, 0, 0}), Opt(cst({1, 1, 1, 1}, {-2})));
  EXPECT_EQ(bias.value().storage(), (std::vector<double>{-2, -2, -2}));
  EXPECT_THROW(conv1d(cst({1, 1, 1, 3}, {1, 2, 3}), cst({1, 1, 1, 2}, {1, 1}), std::nullopt), Error);
}

TEST(Dense, Examples) {
  auto x = cst({1, 2, 1, 1}, {1, 2});
  EXPECT_EQ(dense(x, cst({2, 2, 1, 1}, {1, 0, 0, 1}), Opt(cst({1, 2, 1, 1}, {0, 0}))).value().storage(),
            (std::vector<double>{1, 2}));
  EXPECT_EQ(dense(x, cst({2, 2, 1, 1}, {0, 0, 0, 0}), Opt(cst({1, 2, 1, 1}, {3, -1}))).value().storage(),
            (std::vector<double>{3, -1}));
  EXPECT_EQ(dense(x, cst({2, 2, 1, 1}, {1, 0, 0, 2}), std::nullopt).value().storage(), (std::vector<double>{1, 4}));
  EXPECT_THROW(dense(x, cst({2, 3, 1, 1}, {0, 0, 0, 0, 0, 0}), std::nullopt), Error);
}

TEST(Normalize, InstanceModeExamples) {
  auto c = standardize(cst({1, 1, 2, 2}, {3, 3, 3, 3}), kSpatial, 1e-5);
  for (double v : c.value().storage()) EXPECT_EQ(v, 0.0);
  auto s = standardize(cst({1, 1, 1, 2}, {1, 3}), kSpatial, 1e-12);
  EXPECT_NEAR(s.value()[0], -1.0, 1e-9);
  EXPECT_NEAR(s.value()[1], 1.0, 1e-9);
  EXPECT_THROW(standardize(cst({1, 1, 1, 2}, {1, 3}), kSpatial, 0.0), Error);
}

TEST(Normalize, BatchModeEvalIsIdentity) {
  BatchNorm<double> bn(3);
  auto x = V::constant(random_tensor({2, 3, 2, 2}, 5));
  auto y = bn.forward(x, false);
  for (std::size_t i = 0; i < y.value().size(); ++i)
    EXPECT_NEAR(y.value()[i], x.value()[i] / std::sqrt(1.0 + 1e-5), 1e-15);
}

TEST(Normalize, BatchModeUpdatesRunningStats) {
  BatchNorm<double> bn(1);
  bn.forward(cst({2, 1, 1, 1}, {1, 3}), true);
  EXPECT_NEAR(bn.running_mean()[0], 0.2, 1e-15);        // 0.9 * 0 + 0.1 * 2
  EXPECT_NEAR(bn.running_var()[0], 0.9 + 0.1, 1e-15);   // 0.9 * 1 + 0.1 * 1
}

TEST(ReduceStat, Examples) {
  auto constant = V::constant(Tensor<double>({2, 3, 4, 4}, 2.5));
  auto mean = reduce_mean(constant, kSpatial | kChannel);
  for (double v : mean.value().storage()) EXPECT_EQ(v, 2.5);
  EXPECT_NEAR(reduce_stat(cst({1, 1, 1, 2}, {1, 2}), kSpatial, Stat::Lp, 0.0, 4.0).value()[0],
              std::pow(17.0, 0.25), 1e-15);
  EXPECT_NEAR(std::pow(17.0, 0.25), 2.030543, 1e-6);
  EXPECT_EQ(reduce_stat(cst({1, 1, 1, 3}, {-1, 0, 1}), kSpatial, Stat::Skew, 1e-5).value()[0], 0.0);
  EXPECT_EQ(reduce_stat(cst({1, 1, 1, 2}, {1, 3}), kSpatial, Stat::Std, 0.0).value()[0], 1.0);
  EXPECT_EQ(reduce_max(cst({1, 2, 1, 1}, {-3, 5}), kChannel).value()[0], 5.0);
}

TEST(ReduceStat, Errors) {
  auto x = cst({1, 1, 1, 2}, {1, 2});
  EXPECT_THROW(reduce_stat(x, 0u, Stat::Mean), Error);
  EXPECT_THROW(reduce_stat(x, kSpatial, Stat::Lp, 0.0, 0.5), Error);
}

TEST(ReduceStat, MaxTieGoesToFirstOccurrence) {
  auto x = V::leaf(Tensor<double>({1, 1, 1, 4}, {1, 7, 7, 2}));
  backprop(sum_all(reduce_max(x, kWidth)));
  EXPECT_EQ(x.grad(), (std::vector<double>{0, 1, 0, 0}));
}

TEST(Activation, Examples) {
  EXPECT_EQ(sigmoid(cst({}, {0})).value()[0], 0.5);
  EXPECT_EQ(relu(cst({}, {-2})).value()[0], 0.0);
  auto sm = softmax(V::constant(Tensor<double>({1, 7, 1, 1}, 0.3)), 1);
  for (double v : sm.value().storage()) EXPECT_NEAR(v, 1.0 / 7.0, 1e-15);
  EXPECT_THROW(softmax(sm, 4), Error);
}

TEST(Activation, SoftmaxSlicesSumToOne) {
  auto sm = softmax(V::constant(random_tensor({3, 5, 2, 4}, 9, -10, 10)), 2);
  for (int n = 0; n < 3; ++n)
    for (int c = 0; c < 5; ++c)
      for (int w = 0; w < 4; ++w) EXPECT_NEAR(sm.value().at(n, c, 0, w) + sm.value().at(n, c, 1, w), 1.0, 1e-6);
}

TEST(Activation, SigmoidStaysInsideUnitInterval) {
  auto s = sigmoid(V::constant(random_tensor({4, 4, 4, 4}, 2, -30, 30)));
  for (double v : s.value().storage()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(Backprop, SquareAtThree) {
  auto x = V::leaf(Tensor<double>({}, {3}));
  backprop(square(x));
  EXPECT_EQ(x.grad()[0], 6.0);
}

TEST(Backprop, ConvSumMatchesFiniteDifferences) {
  auto w = V::leaf(random_tensor({2, 3, 3, 3}, 11));
  auto xt = random_tensor({2, 3, 4, 5}, 12);
  auto res = grad_check<double>(
      std::function<V(const V&)>([&](const V& x) { return sum_all(conv2d(x, w, std::nullopt, Conv2dOptions::same(3, 3))); }),
      xt);
  EXPECT_LT(res.max_rel_error, 1e-5);
  auto x = V::leaf(xt);
  auto res_w = grad_check<double>([&] { return sum_all(conv2d(x, w, std::nullopt, Conv2dOptions::same(3, 3))); },
                                  {w});
  EXPECT_LT(res_w.max_rel_error, 1e-5);
}

TEST(Backprop, SigmoidOfDenseMatchesFiniteDifferences) {
  auto w = V::leaf(random_tensor({3, 4, 1, 1}, 13));
  auto b = V::leaf(random_tensor({1, 3, 1, 1}, 14));
  auto x = V::leaf(random_tensor({2, 4, 1, 1}, 15));
  auto res = grad_check<double>([&] { return project(sigmoid(dense(x, w, Opt(b))), 16); }, {x, w, b});
  EXPECT_LT(res.max_rel_error, 1e-5);
}

TEST(Backprop, Errors) {
  EXPECT_THROW(backprop(V::leaf(Tensor<double>({1, 2, 1, 1}))), Error);
  EXPECT_THROW(backprop(V::constant(Tensor<double>({}, {1.0}))), Error);
}

TEST(Backprop, TwoCallsDoubleTheGradient) {
  auto x = V::leaf(random_tensor({2, 3, 4, 4}, 21));
  auto w = V::leaf(random_tensor({2, 3, 3, 3}, 22));
  auto loss = project(sigmoid(conv2d(x, w, std::nullopt, Conv2dOptions::same(3, 3))), 23);
  backprop(loss);
  const auto once_x = x.grad();
  const auto once_w = w.grad();
  backprop(loss);
  for (std::size_t i = 0; i < once_x.size(); ++i) EXPECT_EQ(x.grad()[i], 2.0 * once_x[i]);
  for (std::size_t i = 0; i < once_w.size(); ++i) EXPECT_EQ(w.grad()[i], 2.0 * once_w[i]);
}

TEST(Backprop, SharedSubexpressionVisitedOnce) {
  auto x = V::leaf(Tensor<double>({}, {2}));
  auto y = square(x);
  backprop(add(y, y));  // d/dx 2x^2 = 4x
  EXPECT_EQ(x.grad()[0], 8.0);
}

TEST(Backprop, NonFiniteValuesAreErrors) {
  EXPECT_THROW(sqrt(cst({}, {-1.0})), Error);
  EXPECT_THROW(div(cst({}, {1.0}), cst({}, {0.0})), Error);
  try {
    exp(cst({}, {1e6}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Numeric);
  }
}

TEST(GradCheck, QuadraticIsNearExact) {
  auto res = grad_check<double>(std::function<V(const V&)>([](const V& x) { return sum_all(square(x)); }),
                                random_tensor({1, 3, 2, 2}, 31, -3, 3));
  EXPECT_LT(res.max_rel_error, 1e-8);
}

TEST(GradCheck, ConstantFunctionHasZeroError) {
  auto res = grad_check<double>(
      std::function<V(const V&)>([](const V&) { return V::constant(Tensor<double>({}, {4.0})); }),
      random_tensor({1, 1, 2, 2}, 32));
  EXPECT_EQ(res.max_rel_error, 0.0);
}

TEST(GradCheck, ReportsCorruptedCoordinate) {
  // sum(x^2) with the backward deliberately scaled by 1.01 at coordinate 2.
  auto faulty = [](const V& x) {
    Tensor<double> y(Shape{});
    for (double v : x.value().storage()) y[0] += v * v;
    return make_result<double>(
        std::move(y), {x},
        [](Node<double>& self) {
          auto& X = *self.inputs[0];
          for (std::size_t i = 0; i < X.value.size(); ++i)
            X.grad[i] += self.grad[0] * 2.0 * X.value[i] * (i == 2 ? 1.01 : 1.0);
        },
        "faulty");
  };
  auto res = grad_check<double>(std::function<V(const V&)>(faulty), random_tensor({1, 1, 1, 5}, 33, 0.5, 2.0));
  EXPECT_GE(res.max_rel_error, 5e-3);
  EXPECT_EQ(res.worst_index, 2u);
}

TEST(GradCheck, RejectsNonScalar) {
  EXPECT_THROW(grad_check<double>(std::function<V(const V&)>([](const V& x) { return square(x); }),
                                  random_tensor({1, 1, 1, 3}, 34)),
               Error);
}

// Every primitive against central differences on 20 random inputs.
class PrimitiveGradient : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGradient, MatchesFiniteDifferences) {
  const int trial = GetParam();
  const std::uint64_t s = 1000 + 17 * trial;
  const Shape shape{2, 3, 4, 4};
  auto x = V::leaf(random_tensor(shape, s));
  auto pos = V::leaf(random_tensor(shape, s + 1, 0.5, 2.0));
  auto chan = V::leaf(random_tensor({1, 3, 1, 1}, s + 2));
  auto w = V::leaf(random_tensor({4, 3, 3, 3}, s + 3));
  auto b = V::leaf(random_tensor({1, 4, 1, 1}, s + 4));
  auto k1 = V::leaf(random_tensor({1, 1, 1, 3}, s + 5));
  auto b1 = V::leaf(random_tensor({1, 1, 1, 1}, s + 6));
  auto dw = V::leaf(random_tensor({5, 48, 1, 1}, s + 7));
  auto mat = V::leaf(random_tensor({2, 1, 3, 4}, s + 8));
  auto mat2 = V::leaf(random_tensor({1, 1, 4, 2}, s + 9));
  auto seq = V::leaf(random_tensor({2, 1, 1, 6}, s + 10));
  auto away = V::leaf(sase::testing::signed_tensor(shape, s + 11));

  struct Case {
    const char* name;
    std::function<V()> f;
    std::vector<V> leaves;
  };
  std::uint64_t r = s + 100;
  const std::vector<Case> cases = {
      {"add", [&] { return project(add(x, chan), r); }, {x, chan}},
      {"sub", [&] { return project(sub(chan, x), r); }, {x, chan}},
      {"mul", [&] { return project(mul(x, chan), r); }, {x, chan}},
      {"div", [&] { return project(div(x, pos), r); }, {x, pos}},
      {"scale", [&] { return project(add_scalar(scale(x, 1.7), 0.3), r); }, {x}},
      {"relu", [&] { return project(relu(x), r); }, {x}},
      {"sigmoid", [&] { return project(sigmoid(x), r); }, {x}},
      {"square", [&] { return project(square(x), r); }, {x}},
      {"sqrt", [&] { return project(sqrt(pos), r); }, {pos}},
      {"exp", [&] { return project(exp(x), r); }, {x}},
      {"mean", [&] { return project(reduce_mean(x, kSpatial), r); }, {x}},
      {"sum", [&] { return project(reduce_sum(x, kChannel | kBatch), r); }, {x}},
      {"max", [&] { return project(reduce_max(x, kSpatial), r); }, {x}},
      {"std", [&] { return project(reduce_stat(x, kSpatial, Stat::Std, 1e-5), r); }, {x}},
      {"skew", [&] { return project(reduce_stat(x, kChannel, Stat::Skew, 1e-5), r); }, {x}},
      {"lp", [&] { return project(reduce_stat(away, kSpatial, Stat::Lp, 0.0, 4.0), r); }, {away}},
      {"softmax", [&] { return project(softmax(x, 1), r); }, {x}},
      {"conv2d", [&] { return project(conv2d(x, w, Opt(b), Conv2dOptions::same(3, 3)), r); }, {x, w, b}},
      {"conv2d_strided",
       [&] { return project(conv2d(x, w, Opt(b), Conv2dOptions{2, 2, 1, 1, 1}), r); },
       {x, w, b}},
      {"conv1d", [&] { return project(conv1d(seq, k1, Opt(b1)), r); }, {seq, k1, b1}},
      {"dense", [&] { return project(dense(x, dw, std::nullopt), r); }, {x, dw}},
      {"bmm", [&] { return project(bmm(mat, mat2), r); }, {mat, mat2}},
      {"transpose", [&] { return project(transpose_hw(mat), r); }, {mat}},
      {"concat", [&] { return project(concat_channels(x, pos), r); }, {x, pos}},
      {"select", [&] { return project(select_batch(x, 1), r); }, {x}},
      {"standardize", [&] { return project(standardize(x, kSpatial, 1e-5), r); }, {x}},
      {"weighted_sum",
       [&] { return project(weighted_sum(reshape(chan, Shape{1, 3, 1, 1}), {x, pos, square(x)}), r); },
       {x, pos, chan}},
      {"cross_entropy",
       [&] {
         std::vector<int> labels{2, 0};
         return cross_entropy(reshape(reduce_mean(x, kSpatial), Shape{2, 3, 1, 1}), labels);
       },
       {x}},
  };
  for (const auto& c : cases) {
    auto res = grad_check<double>(c.f, c.leaves);
    EXPECT_LT(res.max_rel_error, 1e-5) << c.name << " trial " << trial << " leaf " << res.worst_leaf << " index "
                                       << res.worst_index << " analytic " << res.analytic << " numeric "
                                       << res.numeric;
  }
}

INSTANTIATE_TEST_SUITE_P(Random, PrimitiveGradient, ::testing::Range(0, 20));

TEST(ShapeAlgebra, SmallShapeEnumeration) {
  for (int n = 1; n <= 4; ++n)
    for (int c = 1; c <= 4; ++c)
      for (int h = 1; h <= 4; ++h)
        for (int w = 1; w <= 4; ++w) {
          const Shape s{n, c, h, w};
          auto x = V::constant(random_tensor(s, n * 1000 + c * 100 + h * 10 + w));
          EXPECT_EQ(add(x, V::constant(Tensor<double>({1, c, 1, 1}))).shape(), s);
          EXPECT_EQ(mul(V::constant(Tensor<double>({n, 1, h, w})), x).shape(), s);
          EXPECT_EQ(sigmoid(x).shape(), s);
          EXPECT_EQ(softmax(x, 1).shape(), s);
          for (unsigned axes = 1; axes < 16; ++axes) {
            EXPECT_EQ(reduce_stat(x, axes, Stat::Mean).shape(), reduced_shape(s, axes));
            EXPECT_EQ(reduce_stat(x, axes, Stat::Lp, 0.0, 4.0).shape(), reduced_shape(s, axes));
          }
          EXPECT_EQ(standardize(x, kSpatial, 1e-5).shape(), s);
          for (int k : {1, 3})
            EXPECT_EQ(conv2d(x, V::constant(Tensor<double>({2, c, k, k})), std::nullopt, Conv2dOptions::same(k, k))
                            .shape(),
                        (Shape{n, 2, h, w}));
          EXPECT_EQ(conv2d(x, V::constant(Tensor<double>({3, c, 1, 1})), std::nullopt, Conv2dOptions{2, 2, 0, 0, 1})
                        .shape(),
                    (Shape{n, 3, (h - 1) / 2 + 1, (w - 1) / 2 + 1}));
          EXPECT_EQ(dense(x, V::constant(Tensor<double>({5, c * h * w, 1, 1})), std::nullopt).shape(),
                    (Shape{n, 5, 1, 1}));
          EXPECT_EQ(transpose_hw(x).shape(), (Shape{n, c, w, h}));
        }
}

TEST(Determinism, RepeatedEvaluationIsBitIdentical) {
  auto run = [] {
    Rng rng(77);
    Conv2d<double> conv(3, 4, 3, 3, Conv2dOptions::same(3, 3), true, rng);
    BatchNorm<double> bn(4);
    auto x = V::leaf(random_tensor({2, 3, 5, 5}, 78));
    auto loss = project(relu(bn.forward(conv.forward(x), true)), 79);
    backprop(loss);
    return std::make_pair(loss.value()[0], x.grad());
  };
  EXPECT_EQ(run(), run());
}
