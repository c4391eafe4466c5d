#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "common/grad_cases.hpp"
#include "densepipe/grad_check.hpp"
#include "densepipe/ops.hpp"

namespace densepipe {
namespace {

using testing::random_tensor;

Tensor image(std::size_t h, std::size_t w, std::vector<double> v) { return Tensor({1, 1, h, w}, std::move(v)); }

// Straight loops over the zero-padded field, no im2col.
Tensor conv_oracle(const Tensor& x, const Tensor& w, const std::vector<double>& b, std::size_t stride,
                   std::size_t pad) {
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const std::size_t oh = (h + 2 * pad - kh) / stride + 1, ow = (wd + 2 * pad - kw) / stride + 1;
  Tensor out({n, cout, oh, ow});
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          double acc = b.empty() ? 0.0 : b[o];
          for (std::size_t c = 0; c < cin; ++c)
            for (std::size_t p = 0; p < kh; ++p)
              for (std::size_t q = 0; q < kw; ++q) {
                const long r = static_cast<long>(i * stride + p) - static_cast<long>(pad);
                const long col = static_cast<long>(j * stride + q) - static_cast<long>(pad);
                if (r < 0 || col < 0 || r >= static_cast<long>(h) || col >= static_cast<long>(wd)) continue;
                acc += x.at(s, c, static_cast<std::size_t>(r), static_cast<std::size_t>(col)) * w.at(o, c, p, q);
              }
          out.at(s, o, i, j) = acc;
        }
  return out;
}

TEST(Tensor, ShapeAndValuesAgree) {
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor({2, 0}), ShapeError);
  Tensor t({2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_FALSE(t.has_grad());
  EXPECT_EQ(t.grad().size(), 6u);
}

TEST(Rng, SameSeedSameStream) {
  Rng a(7), b(7);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  Rng init = Rng::stream(7, "init"), drop = Rng::stream(7, "dropout");
  EXPECT_NE(init.next_u64(), drop.next_u64());
  Rng s0 = Rng::stream(7, "shuffle", 0), s1 = Rng::stream(7, "shuffle", 1);
  EXPECT_NE(s0.next_u64(), s1.next_u64());
}

TEST(Conv2d, OneByOneIdentityKernel) {
  Rng rng(3);
  const Tensor x = random_tensor({2, 1, 5, 4}, rng);
  const Tensor w({1, 1, 1, 1}, 1.0);
  const std::vector<double> b{0.0};
  EXPECT_EQ(conv2d(x, w, b, 1, 0), x);
}

TEST(Conv2d, TwoByTwoOnesKernel) {
  const Tensor y = conv2d(image(2, 2, {1, 2, 3, 4}), Tensor({1, 1, 2, 2}, 1.0), std::vector<double>{0.0}, 1, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_DOUBLE_EQ(y[0], 10.0);
}

TEST(Conv2d, PaddedSinglePixel) {
  const Tensor y = conv2d(image(1, 1, {5}), Tensor({1, 1, 3, 3}, 1.0), std::vector<double>{0.0}, 1, 1);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_DOUBLE_EQ(y[0], 5.0);
}

TEST(Conv2d, MatchesDirectSummation) {
  Rng rng(11);
  struct Geo {
    Shape x, w;
    std::size_t stride, pad;
  };
  const Geo cases[] = {{{2, 3, 7, 6}, {4, 3, 3, 3}, 1, 1},
                       {{1, 2, 9, 9}, {3, 2, 7, 7}, 2, 3},
                       {{2, 4, 5, 5}, {2, 4, 1, 1}, 1, 0},
                       {{1, 1, 8, 5}, {2, 1, 3, 2}, 3, 0},
                       {{1, 2, 4, 4}, {1, 2, 3, 3}, 2, 2},
                       {{2, 9, 6, 5}, {3, 9, 3, 3}, 1, 1},
                       {{1, 8, 5, 6}, {2, 8, 2, 3}, 1, 0},
                       {{1, 8, 3, 3}, {2, 8, 3, 3}, 1, 4}};
  for (const Geo& g : cases) {
    const Tensor x = random_tensor(g.x, rng), w = random_tensor(g.w, rng);
    std::vector<double> b(g.w[0]);
    for (double& v : b) v = rng.uniform(-1, 1);
    const Tensor got = conv2d(x, w, b, g.stride, g.pad), want = conv_oracle(x, w, b, g.stride, g.pad);
    ASSERT_EQ(got.shape(), want.shape());
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
  }
}

TEST(Conv2d, OutputExtentFloors) {
  const Tensor y = conv2d(Tensor({1, 1, 8, 7}), Tensor({1, 1, 3, 3}), {}, 2, 0);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
}

TEST(Conv2d, ShapeErrorsNameTheAxis) {
  try {
    conv2d(Tensor({1, 2, 4, 4}), Tensor({1, 3, 3, 3}), {}, 1, 0);
    FAIL() << "expected a shape error";
  } catch (const ShapeError& e) {
    EXPECT_EQ(e.axis(), "channel");
  }
  try {
    conv2d(Tensor({1, 1, 2, 4}), Tensor({1, 1, 3, 3}), {}, 1, 0);
    FAIL() << "expected a shape error";
  } catch (const ShapeError& e) {
    EXPECT_EQ(e.axis(), "height");
  }
}

TEST(BatchNorm, TwoValueChannel) {
  BatchNormState s(1);
  const Tensor y = batch_norm(Tensor({2, 1, 1, 1}, {1.0, 3.0}), s, Mode::train);
  const double expect = 1.0 / std::sqrt(1.0 + 1e-5);
  EXPECT_NEAR(y[0], -expect, 1e-12);
  EXPECT_NEAR(y[1], expect, 1e-12);
  EXPECT_NEAR(y[1], 0.999995, 1e-6);
}

TEST(BatchNorm, ConstantBatchGivesBeta) {
  BatchNormState s(2);
  s.gamma = {3.0, -0.5};
  s.beta = {0.25, 4.0};
  const Tensor y = batch_norm(Tensor({3, 2, 2, 2}, 6.0), s, Mode::train);
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t i = 0; i < 4; ++i) {
      EXPECT_DOUBLE_EQ(y.at(n, 0, i / 2, i % 2), 0.25);
      EXPECT_DOUBLE_EQ(y.at(n, 1, i / 2, i % 2), 4.0);
    }
}

TEST(BatchNorm, EvalUsesRunningStatistics) {
  BatchNormState s(1);
  s.gamma = {2.0};
  s.beta = {1.0};
  const Tensor y = batch_norm(Tensor({1, 1, 1, 1}, 3.0), s, Mode::eval);
  EXPECT_NEAR(y[0], 2.0 * 3.0 / std::sqrt(1.0 + 1e-5) + 1.0, 1e-12);
  EXPECT_NEAR(y[0], 6.99997, 1e-5);
  EXPECT_EQ(s.running_mean[0], 0.0);
  EXPECT_EQ(s.running_var[0], 1.0);
}

TEST(BatchNorm, RunningStatisticsMove) {
  BatchNormState s(1);
  batch_norm(Tensor({2, 1, 1, 1}, {1.0, 3.0}), s, Mode::train);
  EXPECT_NEAR(s.running_mean[0], 0.1 * 2.0, 1e-15);
  EXPECT_NEAR(s.running_var[0], 0.9 + 0.1 * 2.0, 1e-15);  // unbiased variance of {1,3}
  EXPECT_GE(s.running_var[0], 0.0);
}

TEST(BatchNorm, SingleElementTrainBatchIsRejected) {
  BatchNormState s(1);
  EXPECT_THROW(batch_norm(Tensor({1, 1, 1, 1}, 2.0), s, Mode::train), DegenerateBatchError);
  EXPECT_NO_THROW(batch_norm(Tensor({1, 1, 1, 1}, 2.0), s, Mode::eval));
}

TEST(Relu, Definition) {
  const Tensor y = relu(Tensor({3}, {-1.0, 0.0, 2.0}));
  EXPECT_EQ(y.storage(), (std::vector<double>{0.0, 0.0, 2.0}));
  const Tensor pos({4}, {0.5, 1.0, 2.0, 3.0});
  EXPECT_EQ(relu(pos), pos);
}

TEST(Relu, BackwardMask) {
  const Tensor g = relu_backward(Tensor({2}, {-1.0, 2.0}), Tensor({2}, {1.0, 1.0}));
  EXPECT_EQ(g.storage(), (std::vector<double>{0.0, 1.0}));
  EXPECT_EQ(relu_backward(Tensor({1}, 0.0), Tensor({1}, 1.0))[0], 0.0);
}

TEST(AvgPool, Windows) {
  EXPECT_DOUBLE_EQ(avg_pool(image(2, 2, {1, 2, 3, 4}))[0], 2.5);
  const Tensor c = avg_pool(Tensor({1, 2, 4, 6}, 3.25));
  for (double v : c.values()) EXPECT_DOUBLE_EQ(v, 3.25);
  std::vector<double> raster(16);
  for (int i = 0; i < 16; ++i) raster[i] = i + 1;
  const Tensor y = avg_pool(image(4, 4, raster));
  EXPECT_EQ(y.storage(), (std::vector<double>{3.5, 5.5, 11.5, 13.5}));
}

TEST(AvgPool, OddExtentIsAShapeError) {
  EXPECT_THROW(avg_pool(Tensor({1, 1, 3, 4})), ShapeError);
  EXPECT_THROW(avg_pool(Tensor({1, 1, 4, 5})), ShapeError);
}

TEST(AvgPool, ReplicatedUpsamplePreservesWindowMeans) {
  Rng rng(5);
  const Tensor x = random_tensor({1, 2, 4, 4}, rng);
  const Tensor y = avg_pool(x);
  Tensor up(x.shape());
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j) up.at(0, c, i, j) = y.at(0, c, i / 2, j / 2);
  const Tensor again = avg_pool(up);
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(again[i], y[i], 1e-15);
}

TEST(AvgPool, BackwardSpreadsQuarter) {
  const Tensor g = avg_pool_backward({1, 1, 2, 2}, Tensor({1, 1, 1, 1}, 1.0));
  for (double v : g.values()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(GlobalAvgPool, Means) {
  EXPECT_DOUBLE_EQ(global_avg_pool(image(2, 2, {1, 2, 3, 4}))[0], 2.5);
  Tensor two({1, 2, 3, 3});
  for (std::size_t i = 0; i < 9; ++i) {
    two[i] = 1.0;
    two[9 + i] = 7.0;
  }
  const Tensor y = global_avg_pool(two);
  EXPECT_EQ(y.shape(), (Shape{1, 2}));
  EXPECT_EQ(y.storage(), (std::vector<double>{1.0, 7.0}));
  std::vector<double> raster(16);
  for (int i = 0; i < 16; ++i) raster[i] = i + 1;
  EXPECT_DOUBLE_EQ(global_avg_pool(image(4, 4, raster))[0], 8.5);
}

TEST(Dense, AffineMap) {
  const Tensor x({1, 2}, {1.0, 2.0});
  EXPECT_EQ(dense(x, Tensor({2, 2}, {1, 0, 0, 1}), Tensor({2}, 0.0)), x);
  EXPECT_EQ(dense(x, Tensor({2, 2}, {1, 1, 1, -1}), Tensor({2}, 0.0)).storage(), (std::vector<double>{3.0, -1.0}));
  const Tensor b({3}, {0.5, -2.0, 4.0});
  const Tensor y = dense(Tensor({2, 2}, {1, 2, 3, 4}), Tensor({2, 3}, 0.0), b);
  EXPECT_EQ(y.storage(), (std::vector<double>{0.5, -2.0, 4.0, 0.5, -2.0, 4.0}));
}

TEST(Dense, InnerDimensionMismatch) {
  EXPECT_THROW(dense(Tensor({1, 3}), Tensor({2, 2}), Tensor({2})), ShapeError);
}

TEST(Dropout, IdentityCases) {
  Rng rng(1), data(2);
  const Tensor x = random_tensor({10, 10}, data);
  EXPECT_EQ(dropout(x, 0.0, Mode::train, rng).output, x);
  EXPECT_EQ(dropout(x, 0.0, Mode::eval, rng).output, x);
  EXPECT_EQ(dropout(x, 0.5, Mode::eval, rng).output, x);
}

TEST(Dropout, ZeroFraction) {
  Rng rng(1);
  const DropoutResult r = dropout(Tensor({100000}, 1.0), 0.5, Mode::train, rng);
  std::size_t zeros = 0;
  for (double v : r.output.values()) {
    if (v == 0.0) {
      ++zeros;
    } else {
      EXPECT_DOUBLE_EQ(v, 2.0);
    }
  }
  EXPECT_NEAR(static_cast<double>(zeros) / 100000.0, 0.5, 0.02);
  const Tensor g = dropout_backward(Tensor({100000}, 1.0), r.mask);
  EXPECT_EQ(g, r.output);
}

TEST(Dropout, RateOneIsAParameterError) {
  Rng rng(1);
  EXPECT_THROW(dropout(Tensor({4}), 1.0, Mode::train, rng), ParameterError);
  EXPECT_THROW(dropout(Tensor({4}), -0.1, Mode::train, rng), ParameterError);
}

TEST(Concat, ShapesOrderingAndSplit) {
  Rng rng(9);
  const Tensor a = random_tensor({2, 2, 4, 4}, rng), b = random_tensor({2, 3, 4, 4}, rng);
  const Tensor y = concat_channels(std::vector<Tensor>{a, b});
  EXPECT_EQ(y.shape(), (Shape{2, 5, 4, 4}));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(y.at(n, c, i / 4, i % 4), a.at(n, c, i / 4, i % 4));
  const std::size_t sizes[] = {2, 3};
  const std::vector<Tensor> parts = split_channels(y, sizes);
  EXPECT_EQ(parts[0], a);
  EXPECT_EQ(parts[1], b);
}

TEST(Concat, MismatchedHeight) {
  EXPECT_THROW(concat_channels(std::vector<Tensor>{Tensor({1, 2, 4, 4}), Tensor({1, 2, 3, 4})}), ShapeError);
  EXPECT_THROW(concat_channels(std::vector<Tensor>{Tensor({1, 2, 4, 4}), Tensor({2, 2, 4, 4})}), ShapeError);
}

TEST(Softmax, RowsSumToOne) {
  Rng rng(4);
  const Tensor p = softmax(random_tensor({50, 7}, rng, -30.0, 30.0));
  for (std::size_t i = 0; i < 50; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 7; ++j) s += p[i * 7 + j];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  EXPECT_TRUE(softmax(Tensor({1, 2}, {1000.0, -1000.0})).all_finite());
}

TEST(CrossEntropy, EqualLogits) {
  const int labels[] = {0};
  const double w[] = {1.0, 1.0};
  EXPECT_NEAR(softmax_cross_entropy(Tensor({1, 2}, 0.0), labels, w).loss, std::log(2.0), 1e-15);
}

TEST(CrossEntropy, ConfidentCorrect) {
  const int labels[] = {0};
  const double w[] = {1.0, 1.0};
  const double loss = softmax_cross_entropy(Tensor({1, 2}, {10.0, 0.0}), labels, w).loss;
  EXPECT_NEAR(loss, std::log1p(std::exp(-10.0)), 1e-15);
  EXPECT_NEAR(loss, 4.54e-5, 1e-7);
  EXPECT_LT(softmax_cross_entropy(Tensor({1, 2}, {60.0, 0.0}), labels, w).loss, 1e-20);
}

TEST(CrossEntropy, LinearInClassWeight) {
  const Tensor z({1, 3}, {0.3, -1.2, 2.0});
  const int labels[] = {1};
  const double one[] = {1.0, 1.0, 1.0}, two[] = {1.0, 2.0, 1.0};
  EXPECT_NEAR(softmax_cross_entropy(z, labels, two).loss, 2.0 * softmax_cross_entropy(z, labels, one).loss, 1e-15);
}

TEST(CrossEntropy, LabelOutOfRange) {
  const int labels[] = {2};
  const double w[] = {1.0, 1.0};
  EXPECT_THROW(softmax_cross_entropy(Tensor({1, 2}), labels, w), DataError);
}

TEST(GradCheck, DenseSeedOne) {
  Rng rng(1);
  GradCheckCase c;
  c.name = "dense";
  c.inputs = {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng), random_tensor({2}, rng)};
  c.forward = [](const std::vector<Tensor>& in) { return dense(in[0], in[1], in[2]); };
  c.backward = [](const std::vector<Tensor>& in, const Tensor& dy) {
    DenseGrads g = dense_backward(in[0], in[1], dy);
    return std::vector<Tensor>{std::move(g.input), std::move(g.weights), Tensor({g.bias.size()}, g.bias)};
  };
  const GradCheckReport r = grad_check(c, 1e-6, 1);
  EXPECT_TRUE(r.passed) << r.max_rel_error;
  EXPECT_EQ(r.checked, 12u + 8u + 2u);
}

TEST(GradCheck, ConvSeedOne) {
  Rng rng(1);
  const GradCheckReport r =
      grad_check(testing::conv_case("conv 3x3", {1, 2, 5, 5}, {2, 2, 3, 3}, true, 1, 1, rng), 1e-4, 1);
  EXPECT_TRUE(r.passed) << r.max_rel_error;
}

TEST(GradCheck, ReluAtZeroRejected) {
  GradCheckCase c;
  c.name = "relu";
  c.inputs = {Tensor({3}, {-1.0, 0.0, 1.0})};
  c.forward = [](const std::vector<Tensor>& in) { return relu(in[0]); };
  c.backward = [](const std::vector<Tensor>& in, const Tensor& dy) {
    return std::vector<Tensor>{relu_backward(in[0], dy)};
  };
  c.probe_guard = relu_guard();
  const GradCheckReport r = grad_check(c, 1e-4);
  EXPECT_TRUE(r.rejected);
  EXPECT_FALSE(r.passed);
}

TEST(GradCheck, EveryBackwardPass) {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    for (const testing::ToleranceCase& c : testing::grad_cases(seed)) {
      const GradCheckReport r = grad_check(c.test, c.tolerance, seed);
      EXPECT_TRUE(r.passed) << c.test.name << " seed " << seed << " err " << r.max_rel_error << " " << r.note;
    }
  }
}

TEST(Ops, Deterministic) {
  Rng a(21), b(21);
  const Tensor x = random_tensor({4, 16}, a);
  Rng d1(5), d2(5);
  EXPECT_EQ(dropout(x, 0.3, Mode::train, d1).output, dropout(x, 0.3, Mode::train, d2).output);
  const Tensor w = random_tensor({3, 4, 3, 3}, b);
  const Tensor img = random_tensor({2, 4, 6, 6}, b);
  EXPECT_EQ(conv2d(img, w, {}, 1, 1), conv2d(img, w, {}, 1, 1));
}

}  // namespace
}  // namespace densepipe
