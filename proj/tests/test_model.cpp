#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "test_util.hpp"

using namespace frmil;
using frmil::testing::random_tensor;

namespace {

constexpr ModelOptions kEval{0.2, true, 1e-5, true};

struct Fixture {
  Tape<double> tape;
  ModelParams<double> params;
  ModelSlots<Var<double>> bound;

  explicit Fixture(std::size_t dim = 8, std::size_t heads = 2, std::uint64_t seed = 1, bool trainable = false)
      : params(init_params<double>(dim, heads, seed)), bound(bind(tape, params, trainable)) {}

  ForwardTrace<double> run(const Tensor<double>& h, const Mask& mask, const ModelOptions& opt = kEval) {
    return forward(tape.constant(h), mask, bound, params.heads, opt, RunMode{});
  }
};

Mask full(std::size_t n) { return Mask(n, true); }

}  // namespace

TEST(InitParams, DeterministicAndHeadDim) {
  EXPECT_EQ(init_params<float>(64, 8, 5), init_params<float>(64, 8, 5));
  EXPECT_FALSE(init_params<float>(64, 8, 5) == init_params<float>(64, 8, 6));
  EXPECT_EQ(init_params<float>(64, 8, 5).head_dim(), 8u);
  EXPECT_THROW(init_params<float>(10, 4, 0), ConfigError);
}

TEST(InitParams, ShapesAndRanges) {
  const auto p = init_params<double>(16, 4, 3);
  const auto shapes = model_param_shapes(16);
  std::size_t k = 0;
  p.for_each([&](const char* name, const Tensor<double>& t) {
    EXPECT_EQ(shapes[k].first, name);
    EXPECT_EQ(shapes[k].second, t.shape) << name;
    ++k;
  });
  for (double v : p.query_w.data) EXPECT_LE(std::abs(v), 0.25);
  for (double v : p.pem_w.data) EXPECT_LE(std::abs(v), 1.0 / 3.0);
  for (double v : p.query_b.data) EXPECT_EQ(v, 0.0);
  for (double v : p.ln_gain.data) EXPECT_EQ(v, 1.0);
}

TEST(InitParams, ClassTokenIsStandardNormal) {
  std::size_t within = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto p = init_params<double>(512, 8, seed);
    const double mean = std::accumulate(p.class_token.data.begin(), p.class_token.data.end(), 0.0) / 512.0;
    within += std::abs(mean) <= 3.0 / std::sqrt(512.0) ? 1 : 0;
  }
  EXPECT_GE(within, 99u);
}

TEST(SelectMaxInstance, SingleInstance) {
  Fixture f;
  std::mt19937_64 rng(1);
  auto h = random_tensor({1, 8}, rng);
  auto sel = select_max_instance(f.tape.constant(h), full(1), f.bound);
  EXPECT_EQ(sel.index, 0u);
  EXPECT_EQ(sel.query.value().data, h.data);
}

TEST(SelectMaxInstance, ZeroScorerTiesGoToLowestIndex) {
  Fixture f;
  f.params.scorer_w = Tensor<double>({8, 1});
  f.params.scorer_b = Tensor<double>({1, 1});
  Tape<double> tape;
  auto bound = bind(tape, f.params, false);
  std::mt19937_64 rng(2);
  auto sel = select_max_instance(tape.constant(random_tensor({5, 8}, rng)), full(5), bound);
  EXPECT_EQ(sel.index, 0u);
  for (double a : sel.scores.value().data) EXPECT_EQ(a, 0.5);
}

TEST(SelectMaxInstance, MaskedRowsAreNeverSelected) {
  Fixture f;
  std::mt19937_64 rng(3);
  auto h = random_tensor({6, 8}, rng);
  auto logits = matmul(f.tape.constant(h), f.bound.scorer_w).value();
  const auto top = static_cast<std::size_t>(std::max_element(logits.data.begin(), logits.data.end()) - logits.data.begin());
  Mask m = full(6);
  m[top] = false;
  EXPECT_NE(select_max_instance(f.tape.constant(h), m, f.bound).index, top);
  EXPECT_THROW(select_max_instance(f.tape.constant(h), Mask(6, false), f.bound), DataError);
}

TEST(SelectMaxInstance, PermutationMovesIndexButKeepsQuery) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    Fixture f(8, 2, static_cast<std::uint64_t>(trial));
    const std::size_t n = 2 + rng() % 10;
    auto h = random_tensor({n, 8}, rng);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor<double> hp({n, 8});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < 8; ++j) hp(i, j) = h(perm[i], j);
    auto a = select_max_instance(f.tape.constant(h), full(n), f.bound);
    auto b = select_max_instance(f.tape.constant(hp), full(n), f.bound);
    EXPECT_EQ(perm[b.index], a.index);
    EXPECT_EQ(a.query.value(), b.query.value());
    EXPECT_EQ(a.score_max.value(), b.score_max.value());
  }
}

TEST(Recalibrate, HandValueAndCriticalRowIsZero) {
  Tape<double> tape;
  auto h = tape.constant(Tensor<double>({2, 2}, std::vector<double>{1, 2, 3, 1}));
  auto q = tape.constant(Tensor<double>({1, 2}, std::vector<double>{3, 1}));
  EXPECT_EQ(recalibrate(h, q, full(2)).value().data, (std::vector<double>{0, 1, 0, 0}));

  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng() % 12;
    auto x = tape.constant(random_tensor({n, 6}, rng, -3, 3));
    const std::size_t pick = rng() % n;
    auto r = recalibrate(x, slice_rows(x, pick, pick + 1), full(n)).value();
    for (double v : r.data) EXPECT_GE(v, 0.0);
    for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(r(pick, j), 0.0);
  }
}

TEST(Recalibrate, MaskedRowsAreZero) {
  Tape<double> tape;
  std::mt19937_64 rng(6);
  auto x = tape.constant(random_tensor({4, 3}, rng, 1.0, 2.0));
  auto q = tape.constant(Tensor<double>({1, 3}, -5.0));
  auto r = recalibrate(x, q, Mask{true, false, true, false}).value();
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_EQ(r(1, j), 0.0);
    EXPECT_EQ(r(3, j), 0.0);
    EXPECT_GT(r(0, j), 0.0);
  }
}

TEST(GridSide, CeilSqrt) {
  EXPECT_EQ(grid_side(1), 1u);
  EXPECT_EQ(grid_side(5), 3u);
  EXPECT_EQ(grid_side(9), 3u);
  EXPECT_EQ(grid_side(10), 4u);
  EXPECT_EQ(grid_side(37), 7u);
}

TEST(Pem, ZeroKernelIsResidualIdentityPlusClassToken) {
  for (std::size_t n : {1u, 5u, 9u, 13u}) {
    Fixture f;
    f.params.pem_w = Tensor<double>({8, 3, 3});
    f.params.pem_b = Tensor<double>({8});
    Tape<double> tape;
    auto bound = bind(tape, f.params, false);
    std::mt19937_64 rng(n);
    auto h = random_tensor({n, 8}, rng);
    auto tokens = pem_forward(tape.constant(h), full(n), bound, kEval, RunMode{}).value();
    ASSERT_EQ(tokens.shape, (Shape{n + 1, 8}));
    for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(tokens(0, j), f.params.class_token.data[j]);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(tokens(i + 1, j), h(i, j));
  }
}

TEST(Pem, FiveInstancesUseAThreeByThreeGrid) {
  // With a kernel that only reads the cell to the right, instance 2 (grid
  // cell (0,2)) sees the zero padding column and instance 4 (cell (1,1))
  // sees the first pad row position (1,2).
  Fixture f(2, 1);
  f.params.pem_w = Tensor<double>({2, 3, 3});
  f.params.pem_w.data[5] = 1.0;
  f.params.pem_w.data[9 + 5] = 1.0;
  f.params.pem_b = Tensor<double>({2});
  ModelOptions opt = kEval;
  opt.pem_residual = false;
  Tape<double> tape;
  auto bound = bind(tape, f.params, false);
  Tensor<double> h({5, 2}, std::vector<double>{1, 10, 2, 20, 3, 30, 4, 40, 5, 50});
  auto tokens = pem_forward(tape.constant(h), full(5), bound, opt, RunMode{}).value();
  const std::vector<double> expect_c0{2, 3, 0, 5, 0};
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(tokens(i + 1, 0), expect_c0[i]) << i;
    EXPECT_EQ(tokens(i + 1, 1), expect_c0[i] * 10) << i;
  }
}

TEST(Pmsa, SingleTokenGetsFullWeight) {
  Fixture f;
  std::mt19937_64 rng(7);
  auto pooled = pmsa_forward(f.tape.constant(random_tensor({1, 8}, rng)), f.tape.constant(random_tensor({1, 8}, rng)),
                             full(1), f.bound, 2, kEval, RunMode{});
  for (double a : pooled.attention.data) EXPECT_EQ(a, 1.0);
}

TEST(Pmsa, IdenticalTokensGiveUniformAttention) {
  Fixture f;
  std::mt19937_64 rng(8);
  auto row = random_tensor({1, 8}, rng);
  Tensor<double> tokens({6, 8});
  for (std::size_t i = 0; i < 6; ++i) std::copy(row.data.begin(), row.data.end(), tokens.data.begin() + i * 8);
  auto pooled = pmsa_forward(f.tape.constant(random_tensor({1, 8}, rng)), f.tape.constant(tokens), full(6), f.bound, 2,
                             kEval, RunMode{});
  for (double a : pooled.attention.data) EXPECT_NEAR(a, 1.0 / 6.0, 1e-12);
}

TEST(Pmsa, OutputShapeForLargerModel) {
  Fixture f(64, 8);
  std::mt19937_64 rng(9);
  auto pooled = pmsa_forward(f.tape.constant(random_tensor({1, 64}, rng)), f.tape.constant(random_tensor({38, 64}, rng)),
                             full(38), f.bound, 8, kEval, RunMode{});
  EXPECT_EQ(pooled.z.shape(), (Shape{1, 64}));
  EXPECT_EQ(pooled.attention.shape, (Shape{8, 1, 38}));
}

TEST(Forward, TraceInvariantsOnRandomBags) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 100; ++trial) {
    Fixture f(8, 2, static_cast<std::uint64_t>(trial));
    const std::size_t n = 1 + rng() % 20;
    auto tr = f.run(random_tensor({n, 8}, rng, -2, 2), full(n));
    const double p = tr.probability();
    EXPECT_GT(p, 0.0);
    EXPECT_LT(p, 1.0);
    for (double v : tr.recalibrated.value().data) EXPECT_GE(v, 0.0);
    for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(tr.recalibrated.value()(tr.max_index, j), 0.0);
    for (std::size_t h = 0; h < 2; ++h) {
      double s = 0;
      for (std::size_t t = 0; t <= n; ++t) s += tr.attention.data[h * (n + 1) + t];
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
    EXPECT_EQ(tr.tokens.shape(), (Shape{n + 1, 8}));
  }
}

TEST(Forward, SingleInstanceBagIsFinite) {
  Fixture f;
  std::mt19937_64 rng(11);
  auto tr = f.run(random_tensor({1, 8}, rng), full(1));
  for (double v : tr.recalibrated.value().data) EXPECT_EQ(v, 0.0);
  EXPECT_TRUE(tr.z.value().all_finite());
  EXPECT_TRUE(std::isfinite(tr.probability()));
}

TEST(Forward, EvaluationIsRepeatable) {
  Fixture f;
  std::mt19937_64 rng(12);
  auto h = random_tensor({7, 8}, rng);
  auto a = f.run(h, full(7));
  auto b = f.run(h, full(7));
  EXPECT_EQ(a.prob.value(), b.prob.value());
  EXPECT_EQ(a.attention, b.attention);
  EXPECT_EQ(a.z.value(), b.z.value());
}

TEST(Forward, PermutationCanChangeBagProbability) {
  std::mt19937_64 rng(13);
  bool changed = false;
  for (int trial = 0; trial < 20 && !changed; ++trial) {
    Fixture f(8, 2, static_cast<std::uint64_t>(trial));
    auto h = random_tensor({9, 8}, rng, -2, 2);
    Tensor<double> rev({9, 8});
    for (std::size_t i = 0; i < 9; ++i)
      for (std::size_t j = 0; j < 8; ++j) rev(i, j) = h(8 - i, j);
    auto a = f.run(h, full(9));
    auto b = f.run(rev, full(9));
    EXPECT_EQ(a.query.value(), b.query.value());
    changed = std::abs(a.probability() - b.probability()) > 1e-9;
  }
  EXPECT_TRUE(changed);
}

TEST(Forward, MaskedPaddingChangesNothingBeyondShape) {
  std::mt19937_64 rng(14);
  for (int trial = 0; trial < 20; ++trial) {
    Fixture f(8, 2, static_cast<std::uint64_t>(trial));
    const std::size_t n = 1 + rng() % 15, pad = 1 + rng() % 10;
    auto h = random_tensor({n, 8}, rng, -2, 2);
    Tensor<double> hp({n + pad, 8});
    std::copy(h.data.begin(), h.data.end(), hp.data.begin());
    Mask m(n + pad, false);
    std::fill_n(m.begin(), n, true);
    auto a = f.run(h, full(n));
    auto b = f.run(hp, m);
    EXPECT_EQ(a.max_index, b.max_index);
    EXPECT_NEAR(a.probability(), b.probability(), 1e-6);
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(a.z.value().data[j], b.z.value().data[j], 1e-6);
    for (std::size_t i = 0; i < n; ++i) {
      EXPECT_NEAR(a.scores.value().data[i], b.scores.value().data[i], 1e-6);
      for (std::size_t j = 0; j < 8; ++j) {
        EXPECT_NEAR(a.recalibrated.value()(i, j), b.recalibrated.value()(i, j), 1e-6);
        EXPECT_NEAR(a.tokens.value()(i + 1, j), b.tokens.value()(i + 1, j), 1e-6);
      }
    }
    for (std::size_t i = n; i < n + pad; ++i)
      for (std::size_t j = 0; j < 8; ++j) {
        EXPECT_EQ(b.recalibrated.value()(i, j), 0.0);
        EXPECT_EQ(b.tokens.value()(i + 1, j), 0.0);
      }
    for (std::size_t h2 = 0; h2 < 2; ++h2) {
      for (std::size_t t = 0; t <= n; ++t)
        EXPECT_NEAR(a.attention.data[h2 * (n + 1) + t], b.attention.data[h2 * (n + pad + 1) + t], 1e-6);
      for (std::size_t t = n + 1; t <= n + pad; ++t) EXPECT_EQ(b.attention.data[h2 * (n + pad + 1) + t], 0.0);
    }
  }
}

TEST(Forward, EveryParameterReceivesGradient) {
  std::mt19937_64 rng(15);
  auto params = init_params<double>(8, 2, 3);
  std::map<std::string, bool> reached;
  params.for_each([&](const char* name, const Tensor<double>&) { reached[name] = false; });
  for (int trial = 0; trial < 5; ++trial) {
    Tape<double> tape;
    auto bound = bind(tape, params, true);
    const std::size_t n = 4 + rng() % 6;
    auto tr = forward(tape.constant(random_tensor({n, 8}, rng, -2, 2)), full(n), bound, 2, kEval, RunMode{});
    auto loss = add(add(bce_loss(tr.prob, trial % 2), max_instance_loss(tr.score_max, trial % 2)),
                    sum_all(tr.recalibrated));
    tape.backward(loss);
    auto grads = collect_grads<double, ModelSlots<Tensor<double>>>(bound);
    grads.for_each([&](const char* name, const Tensor<double>& g) {
      for (double v : g.data) reached[name] = reached[name] || v != 0.0;
    });
  }
  for (const auto& [name, ok] : reached) EXPECT_TRUE(ok) << name;
}

TEST(Comparator, MeanPoolOfIdenticalInstancesEqualsSingleInstance) {
  auto c = init_comparator<double>(6, 1);
  Tape<double> tape;
  ComparatorSlots<Var<double>> b{tape.constant(c.w), tape.constant(c.b)};
  std::mt19937_64 rng(16);
  auto row = random_tensor({1, 6}, rng);
  Tensor<double> many({5, 6});
  for (std::size_t i = 0; i < 5; ++i) std::copy(row.data.begin(), row.data.end(), many.data.begin() + i * 6);
  EXPECT_NEAR(comparator_forward(PoolKind::Mean, tape.constant(many), full(5), b).value().item(),
              comparator_forward(PoolKind::Mean, tape.constant(row), full(1), b).value().item(), 1e-12);
}

TEST(Comparator, MaxPoolDominatesAndIgnoresDuplicates) {
  auto c = init_comparator<double>(6, 2);
  Tape<double> tape;
  ComparatorSlots<Var<double>> b{tape.constant(c.w), tape.constant(c.b)};
  std::mt19937_64 rng(17);
  auto h = random_tensor({7, 6}, rng);
  auto hv = tape.constant(h);
  const double top = comparator_forward(PoolKind::Max, hv, full(7), b).value().item();
  auto scores = sigmoid(add(matmul(hv, b.w), b.b)).value();
  for (double s : scores.data) EXPECT_GE(top, s);
  const auto arg = static_cast<std::size_t>(std::max_element(scores.data.begin(), scores.data.end()) - scores.data.begin());
  auto dup = concat_rows(hv, slice_rows(hv, arg, arg + 1));
  EXPECT_EQ(comparator_forward(PoolKind::Max, dup, full(8), b).value().item(), top);
}
