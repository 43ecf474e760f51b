#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "frmil/tensor.hpp"

namespace frmil {

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <std::floating_point T>
struct AdamState {
  AdamOptions options;
  std::vector<Tensor<T>> m, v;
  std::uint64_t step = 0;
};

/// theta -= lr * m_hat / (sqrt(v_hat) + eps) with bias-corrected moments.
/// Moment buffers are created on the first call. Throws NumericError on a
/// non-finite gradient before touching any parameter.
template <std::floating_point T>
void adam_step(std::span<Tensor<T>* const> params, std::span<const Tensor<T>> grads, AdamState<T>& state, double lr) {
  if (params.size() != grads.size()) throw DimensionError("adam_step: parameter and gradient counts differ");
  if (state.m.empty()) {
    for (const auto* p : params) {
      state.m.emplace_back(p->shape);
      state.v.emplace_back(p->shape);
    }
  }
  if (state.m.size() != params.size()) throw DimensionError("adam_step: state does not match parameters");
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (grads[k].shape != params[k]->shape || state.m[k].shape != params[k]->shape) {
      throw DimensionError("adam_step: shape mismatch at parameter " + std::to_string(k) + ": " +
                           shape_str(params[k]->shape) + " vs gradient " + shape_str(grads[k].shape));
    }
    if (!grads[k].all_finite()) {
      throw NumericError("adam_step: non-finite gradient for parameter " + std::to_string(k) + " at step " +
                         std::to_string(state.step + 1));
    }
  }
  ++state.step;
  const auto& o = state.options;
  const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k]->data;
    auto& m = state.m[k].data;
    auto& v = state.v[k].data;
    const auto& g = grads[k].data;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      const double mi = o.beta1 * static_cast<double>(m[i]) + (1.0 - o.beta1) * gi;
      const double vi = o.beta2 * static_cast<double>(v[i]) + (1.0 - o.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      p[i] = static_cast<T>(static_cast<double>(p[i]) - lr * (mi / c1) / (std::sqrt(vi / c2) + o.eps));
    }
  }
}

}  // namespace frmil
