#pragma once

// Reverse-mode differentiation over Tensor values. A Tape records every
// operation in execution order; Var is a lightweight handle into it.
// Nodes are only ever appended, so creation order is a topological order.

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "frmil/tensor.hpp"

namespace frmil {

template <std::floating_point T>
class Tape;

template <std::floating_point T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape; }
  bool requires_grad() const { return tape_->requires_grad(id_); }
  const Tensor<T>& grad() const { return tape_->grad(id_); }
  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <std::floating_point T>
class Tape {
 public:
  /// Receives the gradient of the node's output; accumulates into inputs.
  using BackwardFn = std::function<void(Tape&, const Tensor<T>&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, {}); }
  Var<T> parameter(Tensor<T> value) { return push(std::move(value), true, {}); }

  /// Appends an operation result. It tracks gradients iff any input does.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
    bool track = false;
    for (const auto& v : inputs) track = track || requires_grad(v.id());
    return push(std::move(value), track, track ? std::move(fn) : BackwardFn{});
  }

  template <class Range>
  Var<T> record_many(Tensor<T> value, const Range& inputs, BackwardFn fn) {
    bool track = false;
    for (const auto& v : inputs) track = track || requires_grad(v.id());
    return push(std::move(value), track, track ? std::move(fn) : BackwardFn{});
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient after backward(); zeros for tracked nodes the root never reached.
  const Tensor<T>& grad(std::size_t id) const {
    const Node& n = nodes_.at(id);
    if (!n.requires_grad) throw Error("gradient requested for a node that does not track gradients");
    if (n.grad.data.empty()) {
      n.grad = Tensor<T>(n.value.shape);
    }
    return n.grad;
  }

  /// Writable gradient buffer, or nullptr when the node does not track gradients.
  T* grad_data(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    if (n.grad.data.empty()) n.grad = Tensor<T>(n.value.shape);
    return n.grad.data.data();
  }

  void zero_grad() {
    for (auto& n : nodes_) n.grad = Tensor<T>{};
  }

  void backward(Var<T> root) {
    if (root.value().numel() != 1) {
      throw DimensionError("backward root must be a single value, got shape " + shape_str(root.shape()));
    }
    zero_grad();
    if (!requires_grad(root.id())) return;
    grad_data(root.id())[0] = T{1};
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.data.empty()) continue;
      n.backward(*this, n.grad);
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    mutable Tensor<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var<T> push(Tensor<T> value, bool track, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), Tensor<T>{}, track, std::move(fn)});
    return Var<T>(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
};

namespace detail {

enum class Broadcast { Same, Row, Scalar };

template <std::floating_point T>
Broadcast broadcast_kind(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape == b.shape) return Broadcast::Same;
  if (b.numel() == 1) return Broadcast::Scalar;
  if (a.rank() == 2 && b.numel() == a.shape[1] &&
      (b.shape == Shape{1, a.shape[1]} || b.shape == Shape{a.shape[1]})) {
    return Broadcast::Row;
  }
  throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(b.shape) + " onto " +
                       shape_str(a.shape));
}

inline std::size_t broadcast_index(Broadcast kind, std::size_t i, std::size_t cols) {
  switch (kind) {
    case Broadcast::Same: return i;
    case Broadcast::Row: return i % cols;
    case Broadcast::Scalar: return 0;
  }
  return 0;
}

template <std::floating_point T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape));
  }
}

template <std::floating_point T>
T stable_sigmoid(T x) {
  if (x >= 0) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <std::floating_point T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.shape[1] != B.shape[0]) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(A.shape) + " and " + shape_str(B.shape));
  }
  const std::size_t p = A.shape[0], q = A.shape[1], r = B.shape[1];
  Tensor<T> out({p, r});
  for (std::size_t i = 0; i < p; ++i) {
    T* orow = &out.data[i * r];
    for (std::size_t k = 0; k < q; ++k) {
      const T aik = A.data[i * q + k];
      const T* brow = &B.data[k * r];
      for (std::size_t j = 0; j < r; ++j) orow[j] += aik * brow[j];
    }
  }
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib, p, q, r](Tape<T>& t, const Tensor<T>& g) {
    const auto& A = t.value(ia);
    const auto& B = t.value(ib);
    if (T* ga = t.grad_data(ia)) {
      // dA = G * B^T
      for (std::size_t i = 0; i < p; ++i)
        for (std::size_t k = 0; k < q; ++k) {
          T acc{0};
          for (std::size_t j = 0; j < r; ++j) acc += g.data[i * r + j] * B.data[k * r + j];
          ga[i * q + k] += acc;
        }
    }
    if (T* gb = t.grad_data(ib)) {
      // dB = A^T * G
      for (std::size_t i = 0; i < p; ++i)
        for (std::size_t k = 0; k < q; ++k) {
          const T aik = A.data[i * q + k];
          for (std::size_t j = 0; j < r; ++j) gb[k * r + j] += aik * g.data[i * r + j];
        }
    }
  });
}

template <std::floating_point T>
Var<T> transpose(Var<T> a) {
  const auto& A = a.value();
  detail::require_rank(A, 2, "transpose");
  const std::size_t r = A.shape[0], c = A.shape[1];
  Tensor<T> out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.data[j * r + i] = A.data[i * c + j];
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, r, c](Tape<T>& t, const Tensor<T>& g) {
    T* ga = t.grad_data(ia);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g.data[j * r + i];
  });
}

// ---------------------------------------------------------------------------
// Elementwise

enum class ElementwiseOp { Add, Sub, Mul };

/// `b` may match `a`, be a single row of a matrix `a`, or hold one value.
template <std::floating_point T>
Var<T> elementwise(ElementwiseOp op, Var<T> a, Var<T> b) {
  const auto& A = a.value();
  const auto& B = b.value();
  const char* name = op == ElementwiseOp::Add ? "add" : op == ElementwiseOp::Sub ? "sub" : "mul";
  const auto kind = detail::broadcast_kind(A, B, name);
  const std::size_t cols = A.rank() == 2 ? A.shape[1] : A.numel();
  Tensor<T> out(A.shape);
  for (std::size_t i = 0; i < A.numel(); ++i) {
    const T bv = B.data[detail::broadcast_index(kind, i, cols)];
    switch (op) {
      case ElementwiseOp::Add: out.data[i] = A.data[i] + bv; break;
      case ElementwiseOp::Sub: out.data[i] = A.data[i] - bv; break;
      case ElementwiseOp::Mul: out.data[i] = A.data[i] * bv; break;
    }
  }
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [=](Tape<T>& t, const Tensor<T>& g) {
    const auto& A = t.value(ia);
    const auto& B = t.value(ib);
    T* ga = t.grad_data(ia);
    T* gb = t.grad_data(ib);
    for (std::size_t i = 0; i < g.numel(); ++i) {
      const std::size_t j = detail::broadcast_index(kind, i, cols);
      switch (op) {
        case ElementwiseOp::Add:
          if (ga) ga[i] += g.data[i];
          if (gb) gb[j] += g.data[i];
          break;
        case ElementwiseOp::Sub:
          if (ga) ga[i] += g.data[i];
          if (gb) gb[j] -= g.data[i];
          break;
        case ElementwiseOp::Mul:
          if (ga) ga[i] += g.data[i] * B.data[j];
          if (gb) gb[j] += g.data[i] * A.data[i];
          break;
      }
    }
  });
}

template <std::floating_point T>
Var<T> add(Var<T> a, Var<T> b) { return elementwise(ElementwiseOp::Add, a, b); }
template <std::floating_point T>
Var<T> sub(Var<T> a, Var<T> b) { return elementwise(ElementwiseOp::Sub, a, b); }
template <std::floating_point T>
Var<T> mul(Var<T> a, Var<T> b) { return elementwise(ElementwiseOp::Mul, a, b); }

template <std::floating_point T>
Var<T> scale(Var<T> a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v *= s;
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, s](Tape<T>& t, const Tensor<T>& g) {
    T* ga = t.grad_data(ia);
    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += s * g.data[i];
  });
}

template <std::floating_point T>
Var<T> add_scalar(Var<T> a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v += s;
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape<T>& t, const Tensor<T>& g) {
    T* ga = t.grad_data(ia);
    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g.data[i];
  });
}

/// max(0, x); the subgradient at 0 is 0.
template <std::floating_point T>
Var<T> relu(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v = v > T{0} ? v : T{0};
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape<T>& t, const Tensor<T>& g) {
    const auto& x = t.value(ia);
    T* ga = t.grad_data(ia);
    for (std::size_t i = 0; i < g.numel(); ++i)
      if (x.data[i] > T{0}) ga[i] += g.data[i];
  });
}

template <std::floating_point T>
Var<T> sigmoid(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v = detail::stable_sigmoid(v);
  Tape<T>& tape = a.tape();
  const auto ia = a.id();
  const auto io = tape.size();
  return tape.record(std::move(out), {a}, [ia, io](Tape<T>& t, const Tensor<T>& g) {
    const auto& y = t.value(io);
    T* ga = t.grad_data(ia);
    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g.data[i] * y.data[i] * (T{1} - y.data[i]);
  });
}

// ---------------------------------------------------------------------------
// Normalisation

/// Softmax over the last axis. Masked entries are excluded from both the
/// max shift and the normaliser and come out exactly zero.
template <std::floating_point T>
Var<T> softmax_lastdim(Var<T> a, const Mask* mask = nullptr) {
  const auto& A = a.value();
  const std::size_t width = A.shape.back();
  const std::size_t rows = A.numel() / width;
  if (mask && mask->size() != width) {
    throw DimensionError("softmax_lastdim: mask of length " + std::to_string(mask->size()) +
                         " for last extent " + std::to_string(width));
  }
  if (mask && count_true(*mask) == 0) throw InvalidMaskError("softmax_lastdim: every entry is masked");
  auto keep = [mask](std::size_t j) { return !mask || (*mask)[j]; };

  Tensor<T> out(A.shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = &A.data[r * width];
    T* y = &out.data[r * width];
    T peak = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < width; ++j)
      if (keep(j)) peak = std::max(peak, x[j]);
    T total{0};
    for (std::size_t j = 0; j < width; ++j) {
      y[j] = keep(j) ? std::exp(x[j] - peak) : T{0};
      total += y[j];
    }
    for (std::size_t j = 0; j < width; ++j) y[j] /= total;
  }
  Tape<T>& tape = a.tape();
  const auto ia = a.id();
  const auto io = tape.size();
  return tape.record(std::move(out), {a}, [ia, io, rows, width](Tape<T>& t, const Tensor<T>& g) {
    const auto& y = t.value(io);
    T* ga = t.grad_data(ia);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* yr = &y.data[r * width];
      const T* gr = &g.data[r * width];
      T dot{0};
      for (std::size_t j = 0; j < width; ++j) dot += yr[j] * gr[j];
      for (std::size_t j = 0; j < width; ++j) ga[r * width + j] += yr[j] * (gr[j] - dot);
    }
  });
}

template <std::floating_point T>
Var<T> softmax_lastdim(Var<T> a, const Mask& mask) {
  return softmax_lastdim(a, &mask);
}

/// Row-wise standardisation followed by `gain * x + bias`.
template <std::floating_point T>
Var<T> layer_norm(Var<T> a, Var<T> gain, Var<T> bias, T eps = T(1e-5)) {
  const auto& A = a.value();
  detail::require_rank(A, 2, "layer_norm");
  const std::size_t rows = A.shape[0], d = A.shape[1];
  if (d < 2) throw DimensionError("layer_norm: needs at least 2 features, got " + shape_str(A.shape));
  if (gain.value().numel() != d || bias.value().numel() != d) {
    throw DimensionError("layer_norm: gain/bias shapes " + shape_str(gain.shape()) + ", " +
                         shape_str(bias.shape()) + " for input " + shape_str(A.shape));
  }
  const auto& G = gain.value();
  const auto& Bv = bias.value();
  Tensor<T> normed(A.shape);
  std::vector<T> inv_std(rows);
  Tensor<T> out(A.shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = &A.data[r * d];
    T mean{0};
    for (std::size_t j = 0; j < d; ++j) mean += x[j];
    mean /= static_cast<T>(d);
    T var{0};
    for (std::size_t j = 0; j < d; ++j) var += (x[j] - mean) * (x[j] - mean);
    var /= static_cast<T>(d);
    inv_std[r] = T{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const T xh = (x[j] - mean) * inv_std[r];
      normed.data[r * d + j] = xh;
      out.data[r * d + j] = G.data[j] * xh + Bv.data[j];
    }
  }
  const auto ia = a.id(), ig = gain.id(), ib = bias.id();
  return a.tape().record(
      std::move(out), {a, gain, bias},
      [ia, ig, ib, rows, d, normed = std::move(normed), inv_std = std::move(inv_std)](Tape<T>& t,
                                                                                     const Tensor<T>& g) {
        const auto& G = t.value(ig);
        T* ga = t.grad_data(ia);
        T* gg = t.grad_data(ig);
        T* gb = t.grad_data(ib);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* gr = &g.data[r * d];
          const T* xh = &normed.data[r * d];
          if (gg)
            for (std::size_t j = 0; j < d; ++j) gg[j] += gr[j] * xh[j];
          if (gb)
            for (std::size_t j = 0; j < d; ++j) gb[j] += gr[j];
          if (!ga) continue;
          T sum_dxh{0}, sum_dxh_xh{0};
          for (std::size_t j = 0; j < d; ++j) {
            const T dxh = gr[j] * G.data[j];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh[j];
          }
          const T n = static_cast<T>(d);
          for (std::size_t j = 0; j < d; ++j) {
            const T dxh = gr[j] * G.data[j];
            ga[r * d + j] += inv_std[r] / n * (n * dxh - sum_dxh - xh[j] * sum_dxh_xh);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Convolution

/// Per-channel 3x3 convolution (groups == channels) with one ring of zero
/// padding. Input [B x C x H x W], weights [C x 3 x 3], bias [C].
template <std::floating_point T>
Var<T> depthwise_conv2d_3x3(Var<T> a, Var<T> w, Var<T> bias) {
  const auto& X = a.value();
  const auto& W = w.value();
  detail::require_rank(X, 4, "depthwise_conv2d_3x3");
  const std::size_t nb = X.shape[0], nc = X.shape[1], nh = X.shape[2], nw = X.shape[3];
  if (W.shape != Shape{nc, 3, 3} || bias.value().numel() != nc) {
    throw DimensionError("depthwise_conv2d_3x3: weights " + shape_str(W.shape) + " / bias " +
                         shape_str(bias.shape()) + " do not match input channels of " + shape_str(X.shape));
  }
  const auto& Bv = bias.value();
  Tensor<T> out(X.shape);
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t c = 0; c < nc; ++c) {
      const T* x = &X.data[(b * nc + c) * nh * nw];
      const T* k = &W.data[c * 9];
      T* y = &out.data[(b * nc + c) * nh * nw];
      for (std::size_t i = 0; i < nh; ++i)
        for (std::size_t j = 0; j < nw; ++j) {
          T acc = Bv.data[c];
          for (std::size_t di = 0; di < 3; ++di) {
            if (i + di < 1 || i + di - 1 >= nh) continue;
            for (std::size_t dj = 0; dj < 3; ++dj) {
              if (j + dj < 1 || j + dj - 1 >= nw) continue;
              acc += k[di * 3 + dj] * x[(i + di - 1) * nw + (j + dj - 1)];
            }
          }
          y[i * nw + j] = acc;
        }
    }
  const auto ix = a.id(), iw = w.id(), ib = bias.id();
  return a.tape().record(std::move(out), {a, w, bias}, [=](Tape<T>& t, const Tensor<T>& g) {
    const auto& X = t.value(ix);
    const auto& W = t.value(iw);
    T* gx = t.grad_data(ix);
    T* gw = t.grad_data(iw);
    T* gbias = t.grad_data(ib);
    for (std::size_t b = 0; b < nb; ++b)
      for (std::size_t c = 0; c < nc; ++c) {
        const std::size_t base = (b * nc + c) * nh * nw;
        const T* k = &W.data[c * 9];
        for (std::size_t i = 0; i < nh; ++i)
          for (std::size_t j = 0; j < nw; ++j) {
            const T gy = g.data[base + i * nw + j];
            if (gbias) gbias[c] += gy;
            for (std::size_t di = 0; di < 3; ++di) {
              if (i + di < 1 || i + di - 1 >= nh) continue;
              for (std::size_t dj = 0; dj < 3; ++dj) {
                if (j + dj < 1 || j + dj - 1 >= nw) continue;
                const std::size_t src = base + (i + di - 1) * nw + (j + dj - 1);
                if (gw) gw[c * 9 + di * 3 + dj] += gy * X.data[src];
                if (gx) gx[src] += gy * k[di * 3 + dj];
              }
            }
          }
      }
  });
}

// ---------------------------------------------------------------------------
// Reductions

enum class Reduce { Sum, Mean };

/// Reduces a vector (axis 0) or a matrix (axis 0 -> [1 x c], axis 1 -> [r x 1])
/// over the entries whose mask flag is set. The mask spans the reduced axis.
template <std::floating_point T>
Var<T> masked_reduce(Reduce op, Var<T> a, const Mask& mask, std::size_t axis = 0) {
  const auto& A = a.value();
  if (A.rank() > 2 || axis >= A.rank()) {
    throw DimensionError("masked_reduce: axis " + std::to_string(axis) + " invalid for " + shape_str(A.shape));
  }
  const std::size_t rows = A.shape[0];
  const std::size_t cols = A.rank() == 2 ? A.shape[1] : 1;
  const std::size_t reduced = axis == 0 ? rows : cols;
  if (mask.size() != reduced) {
    throw DimensionError("masked_reduce: mask of length " + std::to_string(mask.size()) + " for axis extent " +
                         std::to_string(reduced));
  }
  const std::size_t kept = count_true(mask);
  if (kept == 0) throw InvalidMaskError("masked_reduce: no unmasked entries");
  const T factor = op == Reduce::Mean ? T{1} / static_cast<T>(kept) : T{1};

  Shape out_shape = A.rank() == 1 ? Shape{1} : (axis == 0 ? Shape{1, cols} : Shape{rows, 1});
  Tensor<T> out(out_shape);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const bool on = mask[axis == 0 ? r : c];
      if (!on) continue;
      out.data[axis == 0 ? c : r] += A.data[r * cols + c];
    }
  for (auto& v : out.data) v *= factor;
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [=](Tape<T>& t, const Tensor<T>& g) {
    T* ga = t.grad_data(ia);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) {
        if (!mask[axis == 0 ? r : c]) continue;
        ga[r * cols + c] += factor * g.data[axis == 0 ? c : r];
      }
  });
}

/// Sum of every element, shape [1].
template <std::floating_point T>
Var<T> sum_all(Var<T> a) {
  T total{0};
  for (T v : a.value().data) total += v;
  const auto ia = a.id();
  return a.tape().record(Tensor<T>::scalar(total), {a}, [ia](Tape<T>& t, const Tensor<T>& g) {
    T* ga = t.grad_data(ia);
    const std::size_t n = t.value(ia).numel();
    for (std::size_t i = 0; i < n; ++i) ga[i] += g.data[0];
  });
}

/// Euclidean norm of each row, shape [n]. The gradient of an unsquared norm
/// at the zero vector is 0.
template <std::floating_point T>
Var<T> l2_norm_rows(Var<T> a, bool squared) {
  const auto& A = a.value();
  detail::require_rank(A, 2, "l2_norm_rows");
  const std::size_t rows = A.shape[0], d = A.shape[1];
  Tensor<T> out({rows});
  for (std::size_t r = 0; r < rows; ++r) {
    T s{0};
    for (std::size_t j = 0; j < d; ++j) s += A.data[r * d + j] * A.data[r * d + j];
    out.data[r] = squared ? s : std::sqrt(s);
  }
  Tape<T>& tape = a.tape();
  const auto ia = a.id();
  const auto io = tape.size();
  return tape.record(std::move(out), {a}, [=](Tape<T>& t, const Tensor<T>& g) {
    const auto& A = t.value(ia);
    const auto& y = t.value(io);
    T* ga = t.grad_data(ia);
    for (std::size_t r = 0; r < rows; ++r) {
      T coef;
      if (squared) {
        coef = T{2} * g.data[r];
      } else {
        if (y.data[r] == T{0}) continue;
        coef = g.data[r] / y.data[r];
      }
      for (std::size_t j = 0; j < d; ++j) ga[r * d + j] += coef * A.data[r * d + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Structural

template <std::floating_point T>
Var<T> reshape(Var<T> a, Shape shape) {
  if (shape_numel(shape) != a.value().numel()) {
    throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape) + " changes element count");
  }
  Tensor<T> out(std::move(shape), a.value().data);
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape<T>& t, const Tensor<T>& g) {
    T* ga = t.grad_data(ia);
    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g.data[i];
  });
}

/// Stacks two matrices along the row (token) axis.
template <std::floating_point T>
Var<T> concat_rows(Var<T> a, Var<T> b) {
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.shape[1] != B.shape[1]) {
    throw DimensionError("concat_rows: " + shape_str(A.shape) + " and " + shape_str(B.shape));
  }
  Tensor<T> out({A.shape[0] + B.shape[0], A.shape[1]});
  std::copy(A.data.begin(), A.data.end(), out.data.begin());
  std::copy(B.data.begin(), B.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(A.numel()));
  const auto ia = a.id(), ib = b.id();
  const std::size_t na = A.numel();
  return a.tape().record(std::move(out), {a, b}, [ia, ib, na](Tape<T>& t, const Tensor<T>& g) {
    if (T* ga = t.grad_data(ia))
      for (std::size_t i = 0; i < na; ++i) ga[i] += g.data[i];
    if (T* gb = t.grad_data(ib))
      for (std::size_t i = na; i < g.numel(); ++i) gb[i - na] += g.data[i];
  });
}

/// Joins matrices with equal row counts side by side.
template <std::floating_point T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: nothing to concatenate");
  const std::size_t rows = parts[0].value().shape[0];
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const auto& v = p.value();
    if (v.rank() != 2 || v.shape[0] != rows) {
      throw DimensionError("concat_cols: part of shape " + shape_str(v.shape) + " with " + std::to_string(rows) +
                           " rows expected");
    }
    widths.push_back(v.shape[1]);
    total += v.shape[1];
  }
  Tensor<T> out({rows, total});
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& v = parts[k].value();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < widths[k]; ++c) out.data[r * total + offset + c] = v.data[r * widths[k] + c];
    offset += widths[k];
  }
  std::vector<std::size_t> ids;
  for (const auto& p : parts) ids.push_back(p.id());
  return parts[0].tape().record_many(std::move(out), parts, [=](Tape<T>& t, const Tensor<T>& g) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (T* gp = t.grad_data(ids[k]))
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < widths[k]; ++c) gp[r * widths[k] + c] += g.data[r * total + off + c];
      off += widths[k];
    }
  });
}

/// Rows [begin, end) of a matrix.
template <std::floating_point T>
Var<T> slice_rows(Var<T> a, std::size_t begin, std::size_t end) {
  const auto& A = a.value();
  detail::require_rank(A, 2, "slice_rows");
  if (begin >= end || end > A.shape[0]) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(end) + ") of " +
                         shape_str(A.shape));
  }
  const std::size_t c = A.shape[1];
  Tensor<T> out({end - begin, c},
                std::vector<T>(A.data.begin() + static_cast<std::ptrdiff_t>(begin * c),
                               A.data.begin() + static_cast<std::ptrdiff_t>(end * c)));
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, begin, c](Tape<T>& t, const Tensor<T>& g) {
    T* ga = t.grad_data(ia);
    for (std::size_t i = 0; i < g.numel(); ++i) ga[begin * c + i] += g.data[i];
  });
}

/// Columns [begin, end) of a matrix.
template <std::floating_point T>
Var<T> slice_cols(Var<T> a, std::size_t begin, std::size_t end) {
  const auto& A = a.value();
  detail::require_rank(A, 2, "slice_cols");
  if (begin >= end || end > A.shape[1]) {
    throw DimensionError("slice_cols: [" + std::to_string(begin) + ", " + std::to_string(end) + ") of " +
                         shape_str(A.shape));
  }
  const std::size_t rows = A.shape[0], c = A.shape[1], w = end - begin;
  Tensor<T> out({rows, w});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < w; ++j) out.data[r * w + j] = A.data[r * c + begin + j];
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [=](Tape<T>& t, const Tensor<T>& g) {
    T* ga = t.grad_data(ia);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < w; ++j) ga[r * c + begin + j] += g.data[r * w + j];
  });
}

/// Picks the listed rows, in order.
template <std::floating_point T>
Var<T> gather_rows(Var<T> a, std::vector<std::size_t> index) {
  const auto& A = a.value();
  detail::require_rank(A, 2, "gather_rows");
  const std::size_t c = A.shape[1];
  Tensor<T> out({index.size(), c});
  for (std::size_t k = 0; k < index.size(); ++k) {
    if (index[k] >= A.shape[0]) throw DimensionError("gather_rows: row index out of range for " + shape_str(A.shape));
    std::copy_n(&A.data[index[k] * c], c, &out.data[k * c]);
  }
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, c, index = std::move(index)](Tape<T>& t, const Tensor<T>& g) {
    T* ga = t.grad_data(ia);
    for (std::size_t k = 0; k < index.size(); ++k)
      for (std::size_t j = 0; j < c; ++j) ga[index[k] * c + j] += g.data[k * c + j];
  });
}

/// Inverse of gather_rows: places row k at index[k] of a zero matrix with `rows` rows.
template <std::floating_point T>
Var<T> scatter_rows(Var<T> a, std::vector<std::size_t> index, std::size_t rows) {
  const auto& A = a.value();
  detail::require_rank(A, 2, "scatter_rows");
  if (index.size() != A.shape[0]) throw DimensionError("scatter_rows: index count differs from row count");
  const std::size_t c = A.shape[1];
  Tensor<T> out({rows, c});
  for (std::size_t k = 0; k < index.size(); ++k) {
    if (index[k] >= rows) throw DimensionError("scatter_rows: destination row out of range");
    std::copy_n(&A.data[k * c], c, &out.data[index[k] * c]);
  }
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, c, index = std::move(index)](Tape<T>& t, const Tensor<T>& g) {
    T* ga = t.grad_data(ia);
    for (std::size_t k = 0; k < index.size(); ++k)
      for (std::size_t j = 0; j < c; ++j) ga[k * c + j] += g.data[index[k] * c + j];
  });
}

/// Zeroes the rows whose mask flag is false.
template <std::floating_point T>
Var<T> mask_rows(Var<T> a, const Mask& mask) {
  const auto& A = a.value();
  if (mask.size() != A.rows()) {
    throw DimensionError("mask_rows: mask of length " + std::to_string(mask.size()) + " for " + shape_str(A.shape));
  }
  const std::size_t c = A.cols();
  Tensor<T> out = A;
  for (std::size_t r = 0; r < mask.size(); ++r)
    if (!mask[r]) std::fill_n(&out.data[r * c], c, T{0});
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, c, mask](Tape<T>& t, const Tensor<T>& g) {
    T* ga = t.grad_data(ia);
    for (std::size_t r = 0; r < mask.size(); ++r)
      if (mask[r])
        for (std::size_t j = 0; j < c; ++j) ga[r * c + j] += g.data[r * c + j];
  });
}

/// Single element at flat index `i`, shape [1].
template <std::floating_point T>
Var<T> element(Var<T> a, std::size_t i) {
  if (i >= a.value().numel()) throw DimensionError("element: index out of range for " + shape_str(a.shape()));
  const auto ia = a.id();
  return a.tape().record(Tensor<T>::scalar(a.value().data[i]), {a}, [ia, i](Tape<T>& t, const Tensor<T>& g) {
    t.grad_data(ia)[i] += g.data[0];
  });
}

/// Inverted dropout: identity at evaluation time; during training each entry
/// is zeroed with probability `rate` and survivors scaled by 1/(1-rate).
template <std::floating_point T>
Var<T> dropout(Var<T> a, double rate, bool training, std::mt19937_64* rng) {
  if (!training || rate <= 0.0) return a;
  if (rate >= 1.0) throw Error("dropout: rate must be below 1");
  if (!rng) throw Error("dropout: training mode needs a random generator");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> factor(a.value().numel());
  for (auto& f : factor) f = u(*rng) < rate ? T{0} : keep_scale;
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] *= factor[i];
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, factor = std::move(factor)](Tape<T>& t, const Tensor<T>& g) {
    T* ga = t.grad_data(ia);
    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += factor[i] * g.data[i];
  });
}

/// Binary cross-entropy of a probability held in a single-element Var.
/// The probability is clamped to [1e-7, 1 - 1e-7]; inside the clamp the
/// gradient is zero.
template <std::floating_point T>
Var<T> binary_cross_entropy(Var<T> p, int label) {
  constexpr double lo = 1e-7, hi = 1.0 - 1e-7;
  const double raw = static_cast<double>(p.value().item());
  const double pc = std::clamp(raw, lo, hi);
  const double y = label ? 1.0 : 0.0;
  const double loss = -(y * std::log(pc) + (1.0 - y) * std::log(1.0 - pc));
  const auto ip = p.id();
  const bool clamped = raw < lo || raw > hi;
  return p.tape().record(Tensor<T>::scalar(static_cast<T>(loss)), {p},
                         [ip, pc, y, clamped](Tape<T>& t, const Tensor<T>& g) {
                           if (clamped) return;
                           const double d = -y / pc + (1.0 - y) / (1.0 - pc);
                           t.grad_data(ip)[0] += static_cast<T>(d) * g.data[0];
                         });
}

// ---------------------------------------------------------------------------
// Gradient check

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Relative difference with a small absolute floor so that near-zero
/// gradients are compared in absolute terms.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `h`. `fn(tape, vars)` must build the scalar from
/// the parameter Vars it is handed.
template <class Fn>
GradCheckResult grad_check(Fn&& fn, const std::vector<Tensor<double>>& params, double h = 1e-5) {
  auto evaluate = [&](const std::vector<Tensor<double>>& ps, std::vector<Tensor<double>>* grads) {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    vars.reserve(ps.size());
    for (const auto& p : ps) vars.push_back(tape.parameter(p));
    Var<double> out = fn(tape, std::span<const Var<double>>(vars));
    if (grads) {
      tape.backward(out);
      grads->clear();
      for (const auto& v : vars) grads->push_back(v.grad());
    }
    return out.value().item();
  };

  std::vector<Tensor<double>> analytic;
  evaluate(params, &analytic);

  GradCheckResult result;
  std::vector<Tensor<double>> probe = params;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t i = 0; i < params[p].numel(); ++i) {
      const double orig = probe[p].data[i];
      probe[p].data[i] = orig + h;
      const double up = evaluate(probe, nullptr);
      probe[p].data[i] = orig - h;
      const double down = evaluate(probe, nullptr);
      probe[p].data[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double err = relative_error(analytic[p].data[i], numeric);
      if (err > result.max_rel_error || (p == 0 && i == 0)) {
        result = {err, p, i, analytic[p].data[i], numeric};
      }
    }
  }
  return result;
}

}  // namespace frmil
