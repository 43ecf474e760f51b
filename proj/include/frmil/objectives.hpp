#pragma once

#include <algorithm>
#include <cmath>

#include "frmil/autodiff.hpp"
#include "frmil/model.hpp"

namespace frmil {

struct LossWeights {
  double gamma_bag = 0.33;
  double gamma_max = 0.33;
  double gamma_fm = 0.33;
  double tau = 8.48;

  void validate() const {
    for (double g : {gamma_bag, gamma_max, gamma_fm}) {
      if (!std::isfinite(g) || g < 0) throw ConfigError("loss weights must be finite and nonnegative");
    }
    if (!std::isfinite(tau) || tau <= 0) throw ConfigError("margin tau must be positive and finite");
  }
};

inline constexpr double kProbClamp = 1e-7;

/// Scalar BCE for reporting; same clamp as the differentiable version.
inline double bce_loss(double p, int label) {
  const double pc = std::clamp(p, kProbClamp, 1.0 - kProbClamp);
  return label ? -std::log(pc) : -std::log(1.0 - pc);
}

template <std::floating_point T>
Var<T> bce_loss(Var<T> p, int label) {
  return binary_cross_entropy(p, label);
}

/// BCE on the selected instance's score; only that instance receives gradient.
template <std::floating_point T>
Var<T> max_instance_loss(Var<T> score_max, int label) {
  return binary_cross_entropy(score_max, label);
}

/// Mean over real positive rows of max(0, tau - |row|) plus mean over real
/// negative rows of |row|. Each side is averaged over its own bag.
template <std::floating_point T>
Var<T> feature_magnitude_loss(Var<T> positive, const Mask& positive_mask, Var<T> negative, const Mask& negative_mask,
                              double tau, bool squared = false) {
  if (count_true(positive_mask) == 0 || count_true(negative_mask) == 0) {
    throw DataError("feature_magnitude_loss: each side needs at least one real instance");
  }
  Var<T> hinge = relu(add_scalar(scale(l2_norm_rows(positive, squared), T{-1}), static_cast<T>(tau)));
  Var<T> pos_term = masked_reduce(Reduce::Mean, hinge, positive_mask, 0);
  Var<T> neg_term = masked_reduce(Reduce::Mean, l2_norm_rows(negative, squared), negative_mask, 0);
  return add(pos_term, neg_term);
}

template <std::floating_point T>
struct LossTerms {
  Var<T> total;
  Var<T> bag;  // mean of the two bag BCEs
  Var<T> max;  // mean of the two max-instance BCEs
  Var<T> fm;

  double total_value() const { return static_cast<double>(total.value().item()); }
  double bag_value() const { return static_cast<double>(bag.value().item()); }
  double max_value() const { return static_cast<double>(max.value().item()); }
  double fm_value() const { return static_cast<double>(fm.value().item()); }
};

/// gamma_bag * L_bag + gamma_max * L_max + gamma_fm * L_fm over one balanced
/// pair. The traces may come in either order but must carry opposite labels.
template <std::floating_point T>
LossTerms<T> total_loss(const ForwardTrace<T>& first, int first_label, const ForwardTrace<T>& second,
                        int second_label, const LossWeights& w, bool fm_squared = false) {
  if ((first_label != 0) == (second_label != 0)) {
    throw DataError("balanced batch violation: both bags carry label " + std::to_string(first_label));
  }
  const ForwardTrace<T>& pos = first_label ? first : second;
  const ForwardTrace<T>& neg = first_label ? second : first;
  const T half = T(0.5);
  LossTerms<T> out;
  out.bag = scale(add(bce_loss(pos.prob, 1), bce_loss(neg.prob, 0)), half);
  out.max = scale(add(max_instance_loss(pos.score_max, 1), max_instance_loss(neg.score_max, 0)), half);
  out.fm = feature_magnitude_loss(pos.recalibrated, pos.mask, neg.recalibrated, neg.mask, w.tau, fm_squared);
  out.total = add(add(scale(out.bag, static_cast<T>(w.gamma_bag)), scale(out.max, static_cast<T>(w.gamma_max))),
                  scale(out.fm, static_cast<T>(w.gamma_fm)));
  return out;
}

}  // namespace frmil
