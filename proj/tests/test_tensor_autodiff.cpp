#include <cmath>
#include <random>

#include "test_util.hpp"

using namespace frmil;
using frmil::testing::random_tensor;

namespace {

Tensor<double> t2(std::size_t r, std::size_t c, std::vector<double> v) { return Tensor<double>({r, c}, std::move(v)); }

}  // namespace

TEST(Tensor, RejectsZeroExtentAndWrongValueCount) {
  EXPECT_THROW(Tensor<double>({2, 0}), DimensionError);
  EXPECT_THROW(t2(2, 2, {1, 2, 3}), DimensionError);
}

TEST(Matmul, IdentityTimesMatrix) {
  Tape<double> tape;
  auto m = tape.constant(t2(2, 2, {1.5, -2, 0.25, 7}));
  auto out = matmul(tape.constant(t2(2, 2, {1, 0, 0, 1})), m);
  EXPECT_EQ(out.value(), m.value());
}

TEST(Matmul, HandValue) {
  Tape<double> tape;
  auto out = matmul(tape.constant(t2(2, 2, {1, 2, 3, 4})), tape.constant(t2(2, 1, {1, 1})));
  EXPECT_EQ(out.value().data, (std::vector<double>{3, 7}));
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tape<double> tape;
  try {
    matmul(tape.constant(Tensor<double>({2, 3})), tape.constant(Tensor<double>({2, 3})));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3] and [2x3]"), std::string::npos) << msg;
  }
}

TEST(Matmul, GradientOfSumIsTransposeBroadcast) {
  Tape<double> tape;
  std::mt19937_64 rng(3);
  auto a = tape.parameter(random_tensor({3, 2}, rng));
  auto b = tape.parameter(random_tensor({2, 4}, rng));
  tape.backward(sum_all(matmul(a, b)));
  const auto& ga = a.grad();
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 2; ++k) {
      double row_sum = 0;
      for (std::size_t j = 0; j < 4; ++j) row_sum += b.value()(k, j);
      EXPECT_NEAR(ga(i, k), row_sum, 1e-12);
    }
}

TEST(Elementwise, SubSelfIsZero) {
  Tape<double> tape;
  std::mt19937_64 rng(1);
  auto x = tape.constant(random_tensor({3, 4}, rng));
  for (double v : sub(x, x).value().data) EXPECT_EQ(v, 0.0);
}

TEST(Elementwise, RowBroadcastHandValue) {
  Tape<double> tape;
  auto out = sub(tape.constant(t2(2, 2, {1, 2, 3, 1})), tape.constant(t2(1, 2, {3, 1})));
  EXPECT_EQ(out.value().data, (std::vector<double>{-2, 1, 0, 0}));
}

TEST(Elementwise, ScaleByOneIsIdentity) {
  Tape<double> tape;
  std::mt19937_64 rng(2);
  auto x = tape.constant(random_tensor({2, 5}, rng));
  const Tensor<double> scaled = scale(x, 1.0).value();
  EXPECT_EQ(scaled, x.value());
}

TEST(Elementwise, NonBroadcastableShapesThrow) {
  Tape<double> tape;
  EXPECT_THROW(add(tape.constant(Tensor<double>({2, 3})), tape.constant(Tensor<double>({2, 2}))), DimensionError);
}

TEST(Relu, HandValueIdempotenceAndNonnegativity) {
  Tape<double> tape;
  auto x = tape.constant(t2(2, 2, {-2, 1, 0, 0}));
  EXPECT_EQ(relu(x).value().data, (std::vector<double>{0, 1, 0, 0}));
  std::mt19937_64 rng(4);
  auto r = relu(tape.constant(random_tensor({4, 4}, rng)));
  const Tensor<double> twice = relu(r).value();
  EXPECT_EQ(twice, r.value());
  for (double v : r.value().data) EXPECT_GE(v, 0.0);
  auto pos = tape.constant(random_tensor({3, 3}, rng, 0.0, 2.0));
  const Tensor<double> kept = relu(pos).value();
  EXPECT_EQ(kept, pos.value());
}

TEST(Relu, SubgradientAtZeroIsZero) {
  Tape<double> tape;
  auto x = tape.parameter(t2(1, 3, {0, 1, -1}));
  tape.backward(sum_all(relu(x)));
  EXPECT_EQ(x.grad().data, (std::vector<double>{0, 1, 0}));
}

TEST(Sigmoid, SymmetryAndStability) {
  Tape<double> tape;
  EXPECT_EQ(sigmoid(tape.constant(Tensor<double>::scalar(0.0))).value().item(), 0.5);
  std::mt19937_64 rng(5);
  auto x = tape.constant(random_tensor({1, 50}, rng, -30, 30));
  auto s = sigmoid(x).value();
  auto sn = sigmoid(scale(x, -1.0)).value();
  for (std::size_t i = 0; i < s.numel(); ++i) EXPECT_NEAR(s.data[i] + sn.data[i], 1.0, 1e-12);
  auto extreme = sigmoid(tape.constant(t2(1, 4, {-1000, -500, 500, 1000}))).value();
  EXPECT_EQ(extreme.data[0], 0.0);
  EXPECT_NEAR(extreme.data[1], std::exp(-500.0), 1e-300);
  EXPECT_EQ(extreme.data[3], 1.0);
  for (double v : extreme.data) EXPECT_TRUE(std::isfinite(v));
}

TEST(Softmax, UniformRowMaskedPairAndClosedForm) {
  Tape<double> tape;
  auto u = softmax_lastdim(tape.constant(t2(1, 4, {2, 2, 2, 2}))).value();
  for (double v : u.data) EXPECT_DOUBLE_EQ(v, 0.25);

  auto m = softmax_lastdim(tape.constant(t2(1, 2, {0, 0})), Mask{true, false}).value();
  EXPECT_EQ(m.data, (std::vector<double>{1.0, 0.0}));

  auto s = softmax_lastdim(tape.constant(t2(1, 3, {1, 2, 3}))).value();
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(s.data[i], std::exp(i + 1.0) / z, 1e-7);
}

TEST(Softmax, AllMaskedRowThrows) {
  Tape<double> tape;
  EXPECT_THROW(softmax_lastdim(tape.constant(t2(1, 2, {1, 2})), Mask{false, false}), InvalidMaskError);
}

TEST(Softmax, RandomRowsSumToOneAndMaskedAreExactlyZero) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    Tape<double> tape;
    const std::size_t c = 1 + rng() % 9;
    Mask mask(c);
    for (std::size_t i = 0; i < c; ++i) mask[i] = rng() % 3 != 0;
    mask[rng() % c] = true;
    auto s = softmax_lastdim(tape.constant(random_tensor({3, c}, rng, -20, 20)), mask).value();
    for (std::size_t r = 0; r < 3; ++r) {
      double sum = 0;
      for (std::size_t j = 0; j < c; ++j) {
        EXPECT_GE(s(r, j), 0.0);
        EXPECT_LE(s(r, j), 1.0);
        if (!mask[j]) EXPECT_EQ(s(r, j), 0.0);
        sum += s(r, j);
      }
      EXPECT_NEAR(sum, 1.0, 1e-9);
    }
  }
}

TEST(LayerNorm, ConstantRowAndStandardisation) {
  Tape<double> tape;
  auto gain = tape.constant(Tensor<double>({4}, 1.0));
  auto bias = tape.constant(Tensor<double>({4}));
  for (double v : layer_norm(tape.constant(Tensor<double>({1, 4}, 3.0)), gain, bias).value().data) EXPECT_EQ(v, 0.0);

  std::mt19937_64 rng(7);
  auto y = layer_norm(tape.constant(random_tensor({5, 6}, rng, -4, 4)), tape.constant(Tensor<double>({6}, 1.0)),
                      tape.constant(Tensor<double>({6})))
               .value();
  for (std::size_t r = 0; r < 5; ++r) {
    double mean = 0, var = 0;
    for (std::size_t j = 0; j < 6; ++j) mean += y(r, j) / 6;
    for (std::size_t j = 0; j < 6; ++j) var += (y(r, j) - mean) * (y(r, j) - mean) / 6;
    EXPECT_LT(std::abs(mean), 1e-6);
    EXPECT_NEAR(var, 1.0, 1e-4);
  }
}

TEST(DepthwiseConv, IdentityAndZeroKernels) {
  std::mt19937_64 rng(8);
  Tape<double> tape;
  auto x = tape.constant(random_tensor({2, 3, 4, 5}, rng));
  Tensor<double> id({3, 3, 3});
  for (std::size_t c = 0; c < 3; ++c) id.data[c * 9 + 4] = 1.0;
  auto bias = tape.constant(Tensor<double>({3}));
  const Tensor<double> same = depthwise_conv2d_3x3(x, tape.constant(id), bias).value();
  EXPECT_EQ(same, x.value());
  for (double v : depthwise_conv2d_3x3(x, tape.constant(Tensor<double>({3, 3, 3})), bias).value().data)
    EXPECT_EQ(v, 0.0);
}

TEST(DepthwiseConv, RampWithOnesKernelMatchesNineTermSums) {
  Tape<double> tape;
  Tensor<double> ramp({1, 1, 3, 3}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9});
  auto out = depthwise_conv2d_3x3(tape.constant(ramp), tape.constant(Tensor<double>({1, 3, 3}, 1.0)),
                                  tape.constant(Tensor<double>({1})))
                 .value();
  EXPECT_EQ(out.data, (std::vector<double>{12, 21, 16, 27, 45, 33, 24, 39, 28}));
}

TEST(DepthwiseConv, ChannelMismatchThrows) {
  Tape<double> tape;
  EXPECT_THROW(depthwise_conv2d_3x3(tape.constant(Tensor<double>({1, 2, 3, 3})),
                                    tape.constant(Tensor<double>({3, 3, 3})), tape.constant(Tensor<double>({3}))),
               DimensionError);
}

TEST(DepthwiseConv, EqualsNaiveLoopExactlyUpToTwoByEightBySevenBySeven) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t b = 1 + rng() % 2, c = 1 + rng() % 8, h = 1 + rng() % 7, w = 1 + rng() % 7;
    auto x = random_tensor({b, c, h, w}, rng);
    auto k = random_tensor({c, 3, 3}, rng);
    auto bias = random_tensor({c}, rng);
    Tape<double> tape;
    auto out = depthwise_conv2d_3x3(tape.constant(x), tape.constant(k), tape.constant(bias)).value();
    EXPECT_EQ(out, selftest::naive_depthwise_conv(x, k, bias));
  }
}

TEST(MaskedReduce, FullMaskForcedValueAndLoopOracle) {
  Tape<double> tape;
  auto v = tape.constant(Tensor<double>({2}, std::vector<double>{5, 999}));
  EXPECT_EQ(masked_reduce(Reduce::Mean, v, Mask{true, false}).value().item(), 5.0);
  EXPECT_EQ(masked_reduce(Reduce::Mean, v, Mask{true, true}).value().item(), 502.0);
  EXPECT_THROW(masked_reduce(Reduce::Mean, v, Mask{false, false}), InvalidMaskError);

  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t r = 1 + rng() % 6, c = 1 + rng() % 6;
    auto x = random_tensor({r, c}, rng);
    Mask m(r);
    for (std::size_t i = 0; i < r; ++i) m[i] = rng() % 2;
    m[rng() % r] = true;
    auto got = masked_reduce(Reduce::Mean, tape.constant(x), m, 0).value();
    for (std::size_t j = 0; j < c; ++j) {
      double s = 0;
      std::size_t n = 0;
      for (std::size_t i = 0; i < r; ++i)
        if (m[i]) s += x(i, j), ++n;
      EXPECT_NEAR(got.data[j], s / static_cast<double>(n), 1e-9);
    }
  }
}

TEST(L2NormRows, HandValuesAndZeroRow) {
  Tape<double> tape;
  auto x = tape.parameter(t2(2, 2, {3, 4, 0, 0}));
  EXPECT_EQ(l2_norm_rows(x, false).value().data, (std::vector<double>{5, 0}));
  EXPECT_EQ(l2_norm_rows(x, true).value().data, (std::vector<double>{25, 0}));
  tape.backward(sum_all(l2_norm_rows(x, false)));
  const std::vector<double> expect{0.6, 0.8, 0.0, 0.0};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(x.grad().data[i], expect[i], 1e-15);
}

TEST(Structural, ReshapeKeepsRowMajorOrderAndConcatStacks) {
  Tape<double> tape;
  auto flat = tape.constant(Tensor<double>({1, 9}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9}));
  auto sq = reshape(flat, {3, 3});
  EXPECT_EQ(sq.value()(1, 0), 4.0);
  EXPECT_EQ(sq.value()(2, 2), 9.0);
  EXPECT_THROW(reshape(flat, {2, 4}), DimensionError);
  auto cat = concat_rows(tape.constant(t2(1, 2, {1, 2})), tape.constant(t2(2, 2, {3, 4, 5, 6})));
  EXPECT_EQ(cat.shape(), (Shape{3, 2}));
  EXPECT_EQ(cat.value().data, (std::vector<double>{1, 2, 3, 4, 5, 6}));
}

TEST(Dropout, EvaluationIsIdentityAndTrainingScalesSurvivors) {
  Tape<double> tape;
  std::mt19937_64 rng(11);
  auto x = tape.constant(random_tensor({20, 20}, rng, 1.0, 2.0));
  const Tensor<double> passed = dropout(x, 0.2, false, nullptr).value();
  EXPECT_EQ(passed, x.value());
  auto y = dropout(x, 0.2, true, &rng).value();
  std::size_t zeros = 0;
  for (std::size_t i = 0; i < y.numel(); ++i) {
    if (y.data[i] == 0.0) {
      ++zeros;
    } else {
      EXPECT_NEAR(y.data[i], x.value().data[i] / 0.8, 1e-12);
    }
  }
  EXPECT_GT(zeros, 40u);
  EXPECT_LT(zeros, 120u);
}

TEST(Tape, ConstantsNeverAccumulateGradients) {
  Tape<double> tape;
  auto c = tape.constant(t2(1, 2, {1, 2}));
  auto p = tape.parameter(t2(1, 2, {3, 4}));
  tape.backward(sum_all(mul(c, p)));
  EXPECT_FALSE(c.requires_grad());
  EXPECT_THROW(c.grad(), Error);
  EXPECT_EQ(p.grad().data, (std::vector<double>{1, 2}));
  EXPECT_EQ(p.grad().shape, p.shape());
}

TEST(Tape, ReplayIsBitwiseIdentical) {
  auto run = [] {
    std::mt19937_64 rng(12);
    Tape<double> tape;
    auto x = tape.parameter(random_tensor({4, 6}, rng));
    auto w = tape.parameter(random_tensor({6, 6}, rng));
    auto y = layer_norm(relu(matmul(x, w)), tape.constant(Tensor<double>({6}, 1.0)), tape.constant(Tensor<double>({6})));
    auto s = softmax_lastdim(y);
    tape.backward(sum_all(mul(s, y)));
    return std::pair{s.value(), w.grad()};
  };
  EXPECT_EQ(run(), run());
}

TEST(GradCheck, TwoLayerToyNetwork) {
  std::mt19937_64 rng(13);
  auto fn = [](Tape<double>&, std::span<const Var<double>> v) {
    auto h = relu(add(matmul(v[0], v[1]), v[2]));
    return sum_all(sigmoid(add(matmul(h, v[3]), v[4])));
  };
  std::vector<Tensor<double>> params{random_tensor({5, 4}, rng), random_tensor({4, 6}, rng), random_tensor({1, 6}, rng),
                                     random_tensor({6, 1}, rng), random_tensor({1, 1}, rng)};
  EXPECT_LE(grad_check(fn, params, 1e-5).max_rel_error, 1e-4);
}

TEST(GradCheck, DetectsAWrongGradient) {
  auto fn = [](Tape<double>& tape, std::span<const Var<double>> v) {
    const auto& x = v[0].value();
    Tensor<double> out = Tensor<double>::scalar(x.data[0] * x.data[0]);
    const auto id = v[0].id();
    return tape.record(std::move(out), {v[0]}, [id](Tape<double>& t, const Tensor<double>& g) {
      t.grad_data(id)[0] += 3.0 * g.data[0];  // deliberately not 2x
    });
  };
  EXPECT_GT(grad_check(fn, {Tensor<double>::scalar(1.0)}).max_rel_error, 0.1);
}
