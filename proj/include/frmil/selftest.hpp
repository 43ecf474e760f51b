#pragma once

// Gradient checks for every differentiable operation plus the full
// balanced-batch loss, and exact equivalence checks against naive
// reference implementations.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "frmil/autodiff.hpp"
#include "frmil/bag_data.hpp"
#include "frmil/baseline.hpp"
#include "frmil/metrics.hpp"
#include "frmil/model.hpp"
#include "frmil/objectives.hpp"

namespace frmil {

struct CheckResult {
  std::string name;
  double observed = 0.0;   // max relative error, or number of mismatches
  double tolerance = 0.0;
  bool passed = false;
};

namespace selftest {

inline constexpr double kGradTolerance = 1e-4;
inline constexpr double kStep = 1e-5;
inline constexpr int kSeeds = 20;

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data) v = u(rng);
  return t;
}

inline std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

/// Contracts an arbitrary output with fixed random weights so every output
/// element contributes to the scalar under test.
inline Var<double> contract(Var<double> out, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
  Tensor<double> w = random_tensor(out.shape(), rng);
  return sum_all(mul(out, out.tape().constant(std::move(w))));
}

using Builder = std::function<Var<double>(Tape<double>&, std::span<const Var<double>>)>;
using Case = std::function<std::pair<Builder, std::vector<Tensor<double>>>(std::mt19937_64&, std::uint64_t)>;

inline CheckResult grad_case(const std::string& name, const Case& make) {
  double worst = 0.0;
  for (int s = 0; s < kSeeds; ++s) {
    std::mt19937_64 rng(1000 + static_cast<std::uint64_t>(s));
    auto [fn, params] = make(rng, static_cast<std::uint64_t>(s));
    worst = std::max(worst, grad_check(fn, params, kStep).max_rel_error);
  }
  return {"grad/" + name, worst, kGradTolerance, worst <= kGradTolerance};
}

inline Mask random_mask(std::mt19937_64& rng, std::size_t n) {
  Mask m(n);
  for (std::size_t i = 0; i < n; ++i) m[i] = (rng() & 3u) != 0;
  m[pick(rng, 0, n - 1)] = true;
  return m;
}

inline std::vector<CheckResult> gradient_checks() {
  std::vector<CheckResult> out;
  using P = std::vector<Tensor<double>>;
  using Span = std::span<const Var<double>>;

  out.push_back(grad_case("matmul", [](auto& rng, std::uint64_t s) {
    const auto p = pick(rng, 1, 4), q = pick(rng, 1, 4), r = pick(rng, 1, 4);
    return std::pair{Builder([s](Tape<double>&, Span v) { return contract(matmul(v[0], v[1]), s); }),
                     P{random_tensor({p, q}, rng), random_tensor({q, r}, rng)}};
  }));
  for (auto op : {ElementwiseOp::Add, ElementwiseOp::Sub, ElementwiseOp::Mul}) {
    const char* name = op == ElementwiseOp::Add ? "add" : op == ElementwiseOp::Sub ? "sub" : "mul";
    out.push_back(grad_case(std::string(name) + "_row_broadcast", [op](auto& rng, std::uint64_t s) {
      const auto r = pick(rng, 1, 4), c = pick(rng, 1, 4);
      return std::pair{Builder([s, op](Tape<double>&, Span v) {
                         return contract(add(elementwise(op, v[0], v[1]), elementwise(op, v[0], v[2])), s);
                       }),
                       P{random_tensor({r, c}, rng), random_tensor({1, c}, rng), random_tensor({r, c}, rng)}};
    }));
  }
  out.push_back(grad_case("scale_add_scalar", [](auto& rng, std::uint64_t s) {
    return std::pair{Builder([s](Tape<double>&, Span v) { return contract(add_scalar(scale(v[0], -1.7), 0.3), s); }),
                     P{random_tensor({pick(rng, 1, 3), pick(rng, 1, 5)}, rng)}};
  }));
  out.push_back(grad_case("relu", [](auto& rng, std::uint64_t s) {
    return std::pair{Builder([s](Tape<double>&, Span v) { return contract(relu(v[0]), s); }),
                     P{random_tensor({pick(rng, 1, 4), pick(rng, 1, 5)}, rng)}};
  }));
  out.push_back(grad_case("sigmoid", [](auto& rng, std::uint64_t s) {
    return std::pair{Builder([s](Tape<double>&, Span v) { return contract(sigmoid(v[0]), s); }),
                     P{random_tensor({pick(rng, 1, 4), pick(rng, 1, 5)}, rng, -4.0, 4.0)}};
  }));
  out.push_back(grad_case("softmax_lastdim_masked", [](auto& rng, std::uint64_t s) {
    const auto r = pick(rng, 1, 3), c = pick(rng, 1, 6);
    Mask m = random_mask(rng, c);
    return std::pair{Builder([s, m](Tape<double>&, Span v) { return contract(softmax_lastdim(v[0], m), s); }),
                     P{random_tensor({r, c}, rng, -3.0, 3.0)}};
  }));
  out.push_back(grad_case("layer_norm", [](auto& rng, std::uint64_t s) {
    const auto r = pick(rng, 1, 3), d = pick(rng, 2, 6);
    return std::pair{Builder([s](Tape<double>&, Span v) { return contract(layer_norm(v[0], v[1], v[2], 1e-5), s); }),
                     P{random_tensor({r, d}, rng), random_tensor({d}, rng, 0.5, 1.5), random_tensor({d}, rng)}};
  }));
  out.push_back(grad_case("depthwise_conv2d_3x3", [](auto& rng, std::uint64_t s) {
    const auto b = pick(rng, 1, 2), c = pick(rng, 1, 3), h = pick(rng, 1, 4), w = pick(rng, 1, 4);
    return std::pair{
        Builder([s](Tape<double>&, Span v) { return contract(depthwise_conv2d_3x3(v[0], v[1], v[2]), s); }),
        P{random_tensor({b, c, h, w}, rng), random_tensor({c, 3, 3}, rng), random_tensor({c}, rng)}};
  }));
  for (auto op : {Reduce::Sum, Reduce::Mean}) {
    for (std::size_t axis : {0u, 1u}) {
      const std::string name = std::string("masked_reduce_") + (op == Reduce::Sum ? "sum" : "mean") + "_axis" +
                               std::to_string(axis);
      out.push_back(grad_case(name, [op, axis](auto& rng, std::uint64_t s) {
        const auto r = pick(rng, 1, 5), c = pick(rng, 1, 5);
        Mask m = random_mask(rng, axis == 0 ? r : c);
        return std::pair{
            Builder([s, m, op, axis](Tape<double>&, Span v) { return contract(masked_reduce(op, v[0], m, axis), s); }),
            P{random_tensor({r, c}, rng)}};
      }));
    }
  }
  for (bool squared : {false, true}) {
    out.push_back(grad_case(squared ? "l2_norm_rows_squared" : "l2_norm_rows", [squared](auto& rng, std::uint64_t s) {
      return std::pair{Builder([s, squared](Tape<double>&, Span v) { return contract(l2_norm_rows(v[0], squared), s); }),
                       P{random_tensor({pick(rng, 1, 4), pick(rng, 1, 5)}, rng)}};
    }));
  }
  out.push_back(grad_case("structural", [](auto& rng, std::uint64_t s) {
    const auto r = pick(rng, 2, 5), c = pick(rng, 2, 4);
    return std::pair{Builder([s, r, c](Tape<double>&, Span v) {
                       Var<double> x = concat_rows(v[0], v[1]);
                       Var<double> y = gather_rows(x, {r, 0, r - 1});
                       Var<double> z = scatter_rows(y, {2, 0, 4}, 5);
                       Var<double> t = reshape(transpose(z), {1, c * 5});
                       Var<double> parts = concat_cols<double>({slice_cols(t, 0, 2), slice_rows(v[0], 0, 1)});
                       return add(contract(parts, s), contract(mask_rows(x, Mask(r + 1, true)), s + 1));
                     }),
                     P{random_tensor({r, c}, rng), random_tensor({1, c}, rng)}};
  }));
  out.push_back(grad_case("binary_cross_entropy", [](auto& rng, std::uint64_t s) {
    const int label = static_cast<int>(s % 2);
    return std::pair{Builder([label](Tape<double>&, Span v) { return binary_cross_entropy(sigmoid(v[0]), label); }),
                     P{random_tensor({1}, rng, -3.0, 3.0)}};
  }));
  out.push_back(grad_case("dropout_fixed_mask", [](auto& rng, std::uint64_t s) {
    return std::pair{Builder([s](Tape<double>&, Span v) {
                       std::mt19937_64 g(s);
                       return contract(dropout(v[0], 0.3, true, &g), s);
                     }),
                     P{random_tensor({pick(rng, 1, 4), pick(rng, 2, 5)}, rng)}};
  }));
  return out;
}

/// End-to-end gradient of the three-term loss on a small balanced pair
/// (n <= 6, D = 8, k = 2) against finite differences for all parameters.
inline CheckResult total_loss_gradient_check() {
  constexpr std::size_t dim = 8, heads = 2;
  double worst = 0.0;
  for (int s = 0; s < kSeeds; ++s) {
    std::mt19937_64 rng(5000 + static_cast<std::uint64_t>(s));
    const auto np = pick(rng, 1, 6), nn = pick(rng, 1, 6);
    Tensor<double> pos = random_tensor({np, dim}, rng, -1.5, 1.5);
    Tensor<double> neg = random_tensor({nn, dim}, rng, -1.5, 1.5);
    ModelParams<double> init = init_params<double>(dim, heads, 77 + static_cast<std::uint64_t>(s));
    // Non-trivial biases and layer-norm affine so every branch is exercised.
    init.for_each([&](const char* name, Tensor<double>& t) {
      const std::string n = name;
      if (n.ends_with("_b") || n == "ln_bias" || n == "ln_gain") {
        for (auto& v : t.data) v += std::uniform_real_distribution<double>(-0.3, 0.3)(rng);
      }
    });
    std::vector<Tensor<double>> params;
    init.for_each([&](const char*, const Tensor<double>& t) { params.push_back(t); });
    LossWeights w{0.33, 0.33, 0.33, 2.0};
    ModelOptions opt{0.0, true, 1e-5, true};
    auto fn = [&](Tape<double>& tape, std::span<const Var<double>> v) {
      ModelSlots<Var<double>> b;
      std::size_t k = 0;
      b.for_each([&](const char*, Var<double>& slot) { slot = v[k++]; });
      auto tp = forward(tape.constant(pos), Mask(np, true), b, heads, opt, RunMode{});
      auto tn = forward(tape.constant(neg), Mask(nn, true), b, heads, opt, RunMode{});
      return total_loss(tp, 1, tn, 0, w).total;
    };
    worst = std::max(worst, grad_check(fn, params, kStep).max_rel_error);
  }
  return {"grad/total_loss_end_to_end", worst, kGradTolerance, worst <= kGradTolerance};
}

/// Straightforward 9-term loop used as the reference convolution.
inline Tensor<double> naive_depthwise_conv(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b) {
  const std::size_t nb = x.shape[0], nc = x.shape[1], nh = x.shape[2], nw = x.shape[3];
  Tensor<double> y(x.shape);
  for (std::size_t n = 0; n < nb; ++n)
    for (std::size_t c = 0; c < nc; ++c)
      for (std::size_t i = 0; i < nh; ++i)
        for (std::size_t j = 0; j < nw; ++j) {
          double acc = b.data[c];
          for (int di = -1; di <= 1; ++di)
            for (int dj = -1; dj <= 1; ++dj) {
              const long ii = static_cast<long>(i) + di, jj = static_cast<long>(j) + dj;
              if (ii < 0 || jj < 0 || ii >= static_cast<long>(nh) || jj >= static_cast<long>(nw)) continue;
              acc += w.data[c * 9 + static_cast<std::size_t>((di + 1) * 3 + (dj + 1))] *
                     x.data[((n * nc + c) * nh + static_cast<std::size_t>(ii)) * nw + static_cast<std::size_t>(jj)];
            }
          y.data[((n * nc + c) * nh + i) * nw + j] = acc;
        }
  return y;
}

inline CheckResult conv_oracle_check(int cases = 50) {
  std::mt19937_64 rng(31);
  double mismatches = 0;
  for (int k = 0; k < cases; ++k) {
    Tensor<double> x = random_tensor({pick(rng, 1, 2), pick(rng, 1, 8), pick(rng, 1, 7), pick(rng, 1, 7)}, rng);
    Tensor<double> w = random_tensor({x.shape[1], 3, 3}, rng);
    Tensor<double> b = random_tensor({x.shape[1]}, rng);
    Tape<double> tape;
    auto y = depthwise_conv2d_3x3(tape.constant(x), tape.constant(w), tape.constant(b));
    if (!(y.value() == naive_depthwise_conv(x, w, b))) ++mismatches;
  }
  return {"oracle/depthwise_conv_vs_naive_loop", mismatches, 0.0, mismatches == 0};
}

/// Concordant pairs plus half the ties over all positive/negative pairs.
inline double pairwise_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double num = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (!(y[i] == 1 && y[j] == 0)) continue;
      pairs += 1.0;
      num += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  return num / pairs;
}

inline CheckResult auc_oracle_check(int cases = 100) {
  std::mt19937_64 rng(41);
  double mismatches = 0;
  for (int k = 0; k < cases; ++k) {
    const auto n = pick(rng, 2, 60);
    std::vector<double> s(n);
    std::vector<int> y(n);
    const bool coarse = k % 2 == 0;  // coarse scores force ties
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = coarse ? static_cast<double>(pick(rng, 0, 5)) / 5.0 : std::uniform_real_distribution<double>(0, 1)(rng);
      y[i] = static_cast<int>(rng() & 1u);
    }
    y[0] = 1, y[1] = 0;
    if (auc(s, y) != pairwise_auc(s, y)) ++mismatches;
  }
  return {"oracle/auc_vs_pairwise", mismatches, 0.0, mismatches == 0};
}

/// Independent restatement of the magnitude baseline over raw features.
inline std::vector<int> brute_force_baseline(const std::vector<InstanceBag>& bags, double tau, bool recalibrate) {
  std::vector<int> out;
  for (const auto& bag : bags) {
    const std::size_t n = bag.features.rows(), d = bag.features.cols();
    std::size_t anchor = 0;
    double anchor_norm = -1;
    for (std::size_t r = 0; r < n; ++r) {
      double s = 0;
      for (std::size_t j = 0; j < d; ++j) s += double(bag.features(r, j)) * double(bag.features(r, j));
      if (s > anchor_norm) anchor_norm = s, anchor = r;
    }
    double total = 0;
    for (std::size_t r = 0; r < n; ++r) {
      double s = 0;
      for (std::size_t j = 0; j < d; ++j) {
        double v = double(bag.features(r, j)) - (recalibrate ? double(bag.features(anchor, j)) : 0.0);
        s += v * v;
      }
      total += s;
    }
    const double mu = total / double(n);
    out.push_back((mu >= tau ? 1.0 : mu / tau) >= 0.5 ? 1 : 0);
  }
  return out;
}

inline CheckResult baseline_oracle_check() {
  SyntheticSpec spec;
  spec.n_bags = 50;
  spec.dim = 16;
  spec.bag_min = 5;
  spec.bag_max = 40;
  spec.separation = 3.0;
  spec.seed = 123;
  const auto bags = generate_synthetic(spec);
  std::vector<const InstanceBag*> ptrs;
  for (const auto& b : bags) ptrs.push_back(&b);
  double mismatches = 0;
  for (bool recal : {false, true}) {
    for (double tau : {10.0, 32.0, 40.0, 64.0}) {
      const auto lib = baseline_classify(ptrs, tau, recal);
      const auto ref = brute_force_baseline(bags, tau, recal);
      for (std::size_t i = 0; i < bags.size(); ++i) mismatches += lib.predictions[i] != ref[i] ? 1 : 0;
    }
  }
  return {"oracle/baseline_vs_brute_force", mismatches, 0.0, mismatches == 0};
}

}  // namespace selftest

inline std::vector<CheckResult> run_selftest() {
  auto out = selftest::gradient_checks();
  out.push_back(selftest::total_loss_gradient_check());
  out.push_back(selftest::conv_oracle_check());
  out.push_back(selftest::auc_oracle_check());
  out.push_back(selftest::baseline_oracle_check());
  return out;
}

}  // namespace frmil
