#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "frmil/autodiff.hpp"
#include "frmil/tensor.hpp"

namespace frmil {

/// Forward-pass options that are not learnable.
struct ModelOptions {
  double dropout = 0.2;
  bool pem_residual = true;
  double ln_eps = 1e-5;
  bool embed_instances = true;
};

/// Every learnable piece of the network, generic over what a slot holds:
/// Tensor for stored parameters, Var for parameters bound to a Tape.
/// Linear maps are stored as [in x out] weights and [1 x out] biases.
template <class Slot>
struct ModelSlots {
  Slot embed_w, embed_b;            // instance embedding, D -> D, ReLU
  Slot scorer_w, scorer_b;          // instance scorer, D -> 1
  Slot pem_w, pem_b;                // depthwise 3x3 kernels [D x 3 x 3], bias [D]
  Slot class_token;                 // [1 x D]
  Slot query_w, query_b;            // D -> D
  Slot key_w, key_b;
  Slot value_w, value_b;
  Slot out_w, out_b;
  Slot ln_gain, ln_bias;            // [D]
  Slot classifier_w, classifier_b;  // bag classifier, D -> 1

  template <class F>
  void for_each(F&& f) {
    f("embed_w", embed_w), f("embed_b", embed_b);
    f("scorer_w", scorer_w), f("scorer_b", scorer_b);
    f("pem_w", pem_w), f("pem_b", pem_b);
    f("class_token", class_token);
    f("query_w", query_w), f("query_b", query_b);
    f("key_w", key_w), f("key_b", key_b);
    f("value_w", value_w), f("value_b", value_b);
    f("out_w", out_w), f("out_b", out_b);
    f("ln_gain", ln_gain), f("ln_bias", ln_bias);
    f("classifier_w", classifier_w), f("classifier_b", classifier_b);
  }

  template <class F>
  void for_each(F&& f) const {
    const_cast<ModelSlots*>(this)->for_each([&](const char* name, const Slot& s) { f(name, s); });
  }
};

template <std::floating_point T>
struct ModelParams : ModelSlots<Tensor<T>> {
  std::size_t dim = 0;
  std::size_t heads = 0;

  std::size_t head_dim() const { return dim / heads; }

  template <std::floating_point U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    out.dim = dim;
    out.heads = heads;
    std::vector<const Tensor<T>*> src;
    this->for_each([&](const char*, const Tensor<T>& t) { src.push_back(&t); });
    std::size_t k = 0;
    out.for_each([&](const char*, Tensor<U>& t) { t = src[k++]->template cast<U>(); });
    return out;
  }

  bool all_finite() const {
    bool ok = true;
    this->for_each([&](const char*, const Tensor<T>& t) { ok = ok && t.all_finite(); });
    return ok;
  }

  friend bool operator==(const ModelParams& a, const ModelParams& b) {
    if (a.dim != b.dim || a.heads != b.heads) return false;
    std::vector<const Tensor<T>*> lhs, rhs;
    a.for_each([&](const char*, const Tensor<T>& t) { lhs.push_back(&t); });
    b.for_each([&](const char*, const Tensor<T>& t) { rhs.push_back(&t); });
    for (std::size_t i = 0; i < lhs.size(); ++i)
      if (!(*lhs[i] == *rhs[i])) return false;
    return true;
  }
};

/// Expected shape of every parameter for a (D, k) model, in for_each order.
inline std::vector<std::pair<std::string, Shape>> model_param_shapes(std::size_t dim) {
  ModelSlots<Shape> s;
  s.embed_w = {dim, dim}, s.embed_b = {1, dim};
  s.scorer_w = {dim, 1}, s.scorer_b = {1, 1};
  s.pem_w = {dim, 3, 3}, s.pem_b = {dim};
  s.class_token = {1, dim};
  s.query_w = s.key_w = s.value_w = s.out_w = {dim, dim};
  s.query_b = s.key_b = s.value_b = s.out_b = {1, dim};
  s.ln_gain = s.ln_bias = {dim};
  s.classifier_w = {dim, 1}, s.classifier_b = {1, 1};
  std::vector<std::pair<std::string, Shape>> out;
  s.for_each([&](const char* name, const Shape& shape) { out.emplace_back(name, shape); });
  return out;
}

/// Class token ~ N(0, 1); linear and convolution weights ~ U(+-1/sqrt(fan_in));
/// biases 0; layer-norm gain 1. Deterministic in `seed`.
template <std::floating_point T>
ModelParams<T> init_params(std::size_t dim, std::size_t heads, std::uint64_t seed) {
  if (dim == 0 || heads == 0 || dim % heads != 0) {
    throw ConfigError("feature dimension " + std::to_string(dim) + " is not divisible by head count " +
                      std::to_string(heads));
  }
  ModelParams<T> p;
  p.dim = dim;
  p.heads = heads;
  std::mt19937_64 rng(seed);
  auto uniform = [&](Shape shape, double fan_in) {
    const double bound = 1.0 / std::sqrt(fan_in);
    std::uniform_real_distribution<double> u(-bound, bound);
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data) v = static_cast<T>(u(rng));
    return t;
  };
  const double d = static_cast<double>(dim);
  p.embed_w = uniform({dim, dim}, d);
  p.embed_b = Tensor<T>({1, dim});
  p.scorer_w = uniform({dim, 1}, d);
  p.scorer_b = Tensor<T>({1, 1});
  p.pem_w = uniform({dim, 3, 3}, 9.0);
  p.pem_b = Tensor<T>({dim});
  p.class_token = Tensor<T>({1, dim});
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& v : p.class_token.data) v = static_cast<T>(normal(rng));
  p.query_w = uniform({dim, dim}, d);
  p.query_b = Tensor<T>({1, dim});
  p.key_w = uniform({dim, dim}, d);
  p.key_b = Tensor<T>({1, dim});
  p.value_w = uniform({dim, dim}, d);
  p.value_b = Tensor<T>({1, dim});
  p.out_w = uniform({dim, dim}, d);
  p.out_b = Tensor<T>({1, dim});
  p.ln_gain = Tensor<T>({dim}, T{1});
  p.ln_bias = Tensor<T>({dim});
  p.classifier_w = uniform({dim, 1}, d);
  p.classifier_b = Tensor<T>({1, 1});
  return p;
}

/// Registers every parameter on `tape`; tracked iff `trainable`.
template <std::floating_point T>
ModelSlots<Var<T>> bind(Tape<T>& tape, const ModelSlots<Tensor<T>>& params, bool trainable = true) {
  std::vector<Var<T>> vars;
  params.for_each([&](const char*, const Tensor<T>& t) {
    vars.push_back(trainable ? tape.parameter(t) : tape.constant(t));
  });
  ModelSlots<Var<T>> out;
  std::size_t k = 0;
  out.for_each([&](const char*, Var<T>& v) { v = vars[k++]; });
  return out;
}

/// Gradients of bound parameters after Tape::backward, in parameter layout.
template <std::floating_point T, class Slots>
Slots collect_grads(const ModelSlots<Var<T>>& bound) {
  Slots out;
  std::vector<const Var<T>*> vars;
  bound.for_each([&](const char*, const Var<T>& v) { vars.push_back(&v); });
  std::size_t k = 0;
  out.for_each([&](const char*, Tensor<T>& t) {
    const Var<T>& v = *vars[k++];
    t = v.requires_grad() ? v.grad() : Tensor<T>(v.shape());
  });
  return out;
}

/// Training-time switches for one forward pass.
struct RunMode {
  bool training = false;
  std::mt19937_64* rng = nullptr;
};

template <std::floating_point T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  return add(matmul(x, w), b);
}

template <std::floating_point T>
struct MaxInstance {
  Var<T> scores;     // [n x 1] sigmoid instance probabilities
  std::size_t index;
  Var<T> query;      // [1 x D] raw feature of the selected instance
  Var<T> score_max;  // [1]
};

/// Scores every instance and picks the highest-scoring real one (ties go to
/// the lowest index). The argmax is taken on logits, which orders instances
/// the same way as the probabilities but does not saturate.
template <std::floating_point T>
MaxInstance<T> select_max_instance(Var<T> features, const Mask& mask, const ModelSlots<Var<T>>& p) {
  const std::size_t n = features.value().rows();
  if (mask.size() != n) throw DimensionError("select_max_instance: mask length differs from instance count");
  if (count_true(mask) == 0) throw DataError("select_max_instance: bag has no real instances");
  Var<T> logits = linear(features, p.scorer_w, p.scorer_b);
  std::size_t best = n;
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    if (best == n || logits.value().data[i] > logits.value().data[best]) best = i;
  }
  Var<T> scores = sigmoid(logits);
  return {scores, best, slice_rows(features, best, best + 1), element(scores, best)};
}

/// ReLU(H - h_q) with h_q broadcast across rows; padded rows are zero.
template <std::floating_point T>
Var<T> recalibrate(Var<T> features, Var<T> query, const Mask& mask) {
  return mask_rows(relu(sub(features, query)), mask);
}

inline std::size_t grid_side(std::size_t n) {
  auto g = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n))));
  while (g * g < n) ++g;
  while (g > 1 && (g - 1) * (g - 1) >= n) --g;
  return g;
}

/// Positional encoding: lay the real instances out row-major on the
/// smallest square grid, zero-fill the tail, run the depthwise 3x3
/// convolution (plus residual), keep the first n cells and prepend the
/// class token. Output is [(rows + 1) x D]; padded rows stay zero.
template <std::floating_point T>
Var<T> pem_forward(Var<T> recalibrated, const Mask& mask, const ModelSlots<Var<T>>& p, const ModelOptions& opt,
                   RunMode mode) {
  Tape<T>& tape = recalibrated.tape();
  const std::size_t rows = recalibrated.value().rows();
  const std::size_t dim = recalibrated.value().cols();
  std::vector<std::size_t> real;
  for (std::size_t i = 0; i < rows; ++i)
    if (mask[i]) real.push_back(i);
  const std::size_t n = real.size();
  if (n == 0) throw DataError("pem_forward: bag has no real instances");
  const std::size_t g = grid_side(n);

  Var<T> cells = real.size() == rows ? recalibrated : gather_rows(recalibrated, real);
  if (g * g > n) cells = concat_rows(cells, tape.constant(Tensor<T>({g * g - n, dim})));
  Var<T> grid = reshape(transpose(cells), {1, dim, g, g});
  Var<T> conv = depthwise_conv2d_3x3(grid, p.pem_w, p.pem_b);
  if (opt.pem_residual) conv = add(conv, grid);
  Var<T> restored = slice_rows(transpose(reshape(conv, {dim, g * g})), 0, n);
  if (n != rows) restored = scatter_rows(restored, real, rows);
  Var<T> tokens = concat_rows(p.class_token, restored);
  return dropout(tokens, opt.dropout, mode.training, mode.rng);
}

template <std::floating_point T>
struct Pooled {
  Var<T> z;             // [1 x D]
  Tensor<T> attention;  // [k x 1 x tokens]
};

/// Multi-head attention pooling with the max instance as the single query
/// and the PEM tokens as keys and values, followed by
/// z = LN(phi + ReLU(f_o(phi))) where phi = attention + projected query.
template <std::floating_point T>
Pooled<T> pmsa_forward(Var<T> query, Var<T> tokens, const Mask& token_mask, const ModelSlots<Var<T>>& p,
                       std::size_t heads, const ModelOptions& opt, RunMode mode) {
  const std::size_t dim = tokens.value().cols();
  const std::size_t count = tokens.value().rows();
  if (token_mask.size() != count) throw DimensionError("pmsa_forward: token mask length differs from token count");
  if (heads == 0 || dim % heads != 0) throw DimensionError("pmsa_forward: head count must divide feature dim");
  const std::size_t hd = dim / heads;
  const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));

  Var<T> q = linear(query, p.query_w, p.query_b);
  Var<T> k = linear(tokens, p.key_w, p.key_b);
  Var<T> v = linear(tokens, p.value_w, p.value_b);

  Tensor<T> attention({heads, 1, count});
  std::vector<Var<T>> head_out;
  head_out.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Var<T> qh = slice_cols(q, h * hd, (h + 1) * hd);
    Var<T> kh = slice_cols(k, h * hd, (h + 1) * hd);
    Var<T> vh = slice_cols(v, h * hd, (h + 1) * hd);
    Var<T> weights = softmax_lastdim(scale(matmul(qh, transpose(kh)), inv_sqrt), token_mask);
    std::copy(weights.value().data.begin(), weights.value().data.end(), attention.data.begin() + h * count);
    head_out.push_back(matmul(weights, vh));
  }
  Var<T> phi = add(concat_cols(head_out), q);
  Var<T> ff = relu(linear(dropout(phi, opt.dropout, mode.training, mode.rng), p.out_w, p.out_b));
  Var<T> z = layer_norm(add(phi, ff), p.ln_gain, p.ln_bias, static_cast<T>(opt.ln_eps));
  return {z, std::move(attention)};
}

/// Everything a bag forward pass produces, kept for losses and inspection.
template <std::floating_point T>
struct ForwardTrace {
  Mask mask;
  Var<T> scores;
  std::size_t max_index = 0;
  Var<T> query;
  Var<T> score_max;
  Var<T> recalibrated;
  Var<T> tokens;
  Tensor<T> attention;
  Var<T> z;
  Var<T> logit;
  Var<T> prob;

  double probability() const { return static_cast<double>(prob.value().item()); }
};

/// ReLU(H W_e + b_e) on real rows; padding rows stay zero.
template <std::floating_point T>
Var<T> embed_instances(Var<T> features, const Mask& mask, const ModelSlots<Var<T>>& p) {
  return mask_rows(relu(linear(features, p.embed_w, p.embed_b)), mask);
}

template <std::floating_point T>
ForwardTrace<T> forward(Var<T> input, const Mask& mask, const ModelSlots<Var<T>>& p, std::size_t heads,
                        const ModelOptions& opt, RunMode mode) {
  ForwardTrace<T> tr;
  tr.mask = mask;
  if (mask.size() != input.value().rows()) throw DimensionError("forward: mask length differs from instance count");
  Var<T> features = opt.embed_instances ? embed_instances(input, mask, p) : input;
  auto sel = select_max_instance(features, mask, p);
  tr.scores = sel.scores;
  tr.max_index = sel.index;
  tr.query = sel.query;
  tr.score_max = sel.score_max;
  tr.recalibrated = recalibrate(features, sel.query, mask);
  tr.tokens = pem_forward(tr.recalibrated, mask, p, opt, mode);
  Mask token_mask;
  token_mask.reserve(mask.size() + 1);
  token_mask.push_back(true);
  token_mask.insert(token_mask.end(), mask.begin(), mask.end());
  auto pooled = pmsa_forward(sel.query, tr.tokens, token_mask, p, heads, opt, mode);
  tr.z = pooled.z;
  tr.attention = std::move(pooled.attention);
  tr.logit = linear(tr.z, p.classifier_w, p.classifier_b);
  tr.prob = sigmoid(tr.logit);
  return tr;
}

// ---------------------------------------------------------------------------
// Mean- and max-pooling comparators

enum class PoolKind { Mean, Max };

template <class Slot>
struct ComparatorSlots {
  Slot w, b;  // D -> 1

  template <class F>
  void for_each(F&& f) {
    f("w", w), f("b", b);
  }
  template <class F>
  void for_each(F&& f) const {
    f("w", w), f("b", b);
  }
};

template <std::floating_point T>
ComparatorSlots<Tensor<T>> init_comparator(std::size_t dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(dim));
  std::uniform_real_distribution<double> u(-bound, bound);
  ComparatorSlots<Tensor<T>> c{Tensor<T>({dim, 1}), Tensor<T>({1, 1})};
  for (auto& v : c.w.data) v = static_cast<T>(u(rng));
  return c;
}

/// mean: sigmoid(f(mean of real instances)); max: largest per-instance
/// sigmoid score over real instances.
template <std::floating_point T>
Var<T> comparator_forward(PoolKind kind, Var<T> features, const Mask& mask, const ComparatorSlots<Var<T>>& c) {
  if (count_true(mask) == 0) throw DataError("comparator_forward: bag has no real instances");
  if (kind == PoolKind::Mean) {
    return sigmoid(linear(masked_reduce(Reduce::Mean, features, mask, 0), c.w, c.b));
  }
  Var<T> logits = linear(features, c.w, c.b);
  std::size_t best = mask.size();
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    if (best == mask.size() || logits.value().data[i] > logits.value().data[best]) best = i;
  }
  return element(sigmoid(logits), best);
}

}  // namespace frmil
