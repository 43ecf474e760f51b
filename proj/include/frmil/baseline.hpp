#pragma once

// Non-parametric magnitude baseline: a bag's probability of being positive
// is min(tau, mu) / tau, where mu is the mean (squared) instance norm,
// optionally measured after subtracting the bag's largest-norm instance.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "frmil/bag_data.hpp"
#include "frmil/tensor.hpp"

namespace frmil {

/// Mean over real rows of the per-row Euclidean norm (squared if asked).
template <std::floating_point T>
double mean_magnitude(const Tensor<T>& features, const Mask& mask, bool squared = true) {
  const std::size_t rows = features.rows(), d = features.cols();
  if (mask.size() != rows) throw DimensionError("mean_magnitude: mask length differs from row count");
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double v = static_cast<double>(features.data[r * d + j]);
      s += v * v;
    }
    total += squared ? s : std::sqrt(s);
    ++count;
  }
  if (count == 0) throw DataError("mean_magnitude: bag has no instances");
  return total / static_cast<double>(count);
}

template <std::floating_point T>
double mean_magnitude(const Tensor<T>& features, bool squared = true) {
  return mean_magnitude(features, Mask(features.rows(), true), squared);
}

/// Index of the real row with the largest Euclidean norm (lowest on ties).
template <std::floating_point T>
std::size_t max_norm_row(const Tensor<T>& features, const Mask& mask) {
  const std::size_t rows = features.rows(), d = features.cols();
  std::size_t best = rows;
  double best_norm = -1.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double v = static_cast<double>(features.data[r * d + j]);
      s += v * v;
    }
    if (s > best_norm) best_norm = s, best = r;
  }
  if (best == rows) throw DataError("max_norm_row: bag has no instances");
  return best;
}

/// Subtracts the largest-norm row from every real row (padding stays zero).
/// No ReLU unless `clamp_negative` is set.
template <std::floating_point T>
Tensor<double> recalibrate_by_norm_max(const Tensor<T>& features, const Mask& mask, bool clamp_negative = false) {
  const std::size_t rows = features.rows(), d = features.cols();
  const std::size_t m = max_norm_row(features, mask);
  Tensor<double> out({rows, d});
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    for (std::size_t j = 0; j < d; ++j) {
      double v = static_cast<double>(features.data[r * d + j]) - static_cast<double>(features.data[m * d + j]);
      out.data[r * d + j] = clamp_negative ? std::max(v, 0.0) : v;
    }
  }
  return out;
}

template <std::floating_point T>
Tensor<double> recalibrate_by_norm_max(const Tensor<T>& features) {
  return recalibrate_by_norm_max(features, Mask(features.rows(), true));
}

/// min(tau, mu) / tau.
inline double bag_probability(double mu, double tau) {
  if (!(tau > 0.0)) throw DataError("bag_probability: tau must be positive");
  return std::min(tau, mu) / tau;
}

struct MagnitudeRecord {
  std::string id;
  int label = 0;
  double mu_raw = 0.0;
  double mu_recal = 0.0;
};

struct MagnitudeStats {
  std::vector<MagnitudeRecord> records;
  double tau = 0.0;
  bool norm_squared = true;
};

struct MagnitudeOptions {
  bool squared = true;
  bool clamp_negative = false;  // apply ReLU after the baseline subtraction
};

inline MagnitudeRecord magnitude_record(const InstanceBag& bag, const MagnitudeOptions& opt = {}) {
  return {bag.id, bag.label, mean_magnitude(bag.features, bag.mask, opt.squared),
          mean_magnitude(recalibrate_by_norm_max(bag.features, bag.mask, opt.clamp_negative), bag.mask, opt.squared)};
}

inline std::vector<MagnitudeRecord> magnitude_records(const std::vector<const InstanceBag*>& bags,
                                                      const MagnitudeOptions& opt = {}) {
  std::vector<MagnitudeRecord> out;
  out.reserve(bags.size());
  for (const auto* b : bags) out.push_back(magnitude_record(*b, opt));
  return out;
}

struct TauEstimate {
  double tau = 0.0;
  bool crossing = false;  // false: fell back to the midpoint of class means
  double bandwidth_neg = 0.0;
  double bandwidth_pos = 0.0;
};

namespace detail {

inline double quantile_sorted(const std::vector<double>& v, double q) {
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

/// 0.9 * min(sd, IQR / 1.34) * n^(-1/5)
inline double silverman_bandwidth(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const double n = static_cast<double>(v.size());
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= n;
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  const double sd = std::sqrt(var / (n - 1.0));
  const double iqr = quantile_sorted(v, 0.75) - quantile_sorted(v, 0.25);
  double spread = iqr > 0.0 ? std::min(sd, iqr / 1.34) : sd;
  return 0.9 * spread * std::pow(n, -0.2);
}

inline std::vector<double> gaussian_kde(const std::vector<double>& v, double h, const std::vector<double>& grid) {
  const double norm = 1.0 / (static_cast<double>(v.size()) * h * std::sqrt(2.0 * std::numbers::pi));
  std::vector<double> out(grid.size(), 0.0);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    double s = 0.0;
    for (double x : v) {
      const double z = (grid[i] - x) / h;
      s += std::exp(-0.5 * z * z);
    }
    out[i] = s * norm;
  }
  return out;
}

}  // namespace detail

/// Margin from the train set: Gaussian KDE per class on a shared grid over
/// [0, 1.05 * max mu]; tau is the first grid point past the negative mode
/// where the positive density climbs back to meet the negative one. When
/// the densities never cross that way, the midpoint of the class means.
/// `bandwidth` <= 0 selects Silverman's rule per class.
inline TauEstimate estimate_tau(const std::vector<double>& mu, const std::vector<int>& labels, std::size_t bins = 256,
                                double bandwidth = 0.0) {
  if (mu.size() != labels.size()) throw DimensionError("estimate_tau: value and label counts differ");
  std::vector<double> neg, pos;
  for (std::size_t i = 0; i < mu.size(); ++i) (labels[i] ? pos : neg).push_back(mu[i]);
  if (neg.size() < 2 || pos.size() < 2) {
    throw DataError(std::string("estimate_tau: needs at least two bags per class; ") +
                    (pos.size() < 2 ? "positive" : "negative") + " class has " +
                    std::to_string(pos.size() < 2 ? pos.size() : neg.size()));
  }
  if (bins < 2) throw ConfigError("estimate_tau: needs at least 2 grid points");
  const double top = *std::max_element(mu.begin(), mu.end()) * 1.05;
  if (!(top > 0.0)) throw DataError("estimate_tau: all magnitudes are zero");
  std::vector<double> grid(bins);
  const double step = top / static_cast<double>(bins - 1);
  for (std::size_t i = 0; i < bins; ++i) grid[i] = step * static_cast<double>(i);

  TauEstimate est;
  auto pick_h = [&](const std::vector<double>& v) {
    double h = bandwidth > 0.0 ? bandwidth : detail::silverman_bandwidth(v);
    return h > 0.0 ? h : step;
  };
  est.bandwidth_neg = pick_h(neg);
  est.bandwidth_pos = pick_h(pos);
  const auto dn = detail::gaussian_kde(neg, est.bandwidth_neg, grid);
  const auto dp = detail::gaussian_kde(pos, est.bandwidth_pos, grid);

  const double peak = std::max(*std::max_element(dn.begin(), dn.end()), *std::max_element(dp.begin(), dp.end()));
  const double tol = 1e-9 * peak;
  const auto mode = static_cast<std::size_t>(std::max_element(dn.begin(), dn.end()) - dn.begin());
  bool below = dp[mode] - dn[mode] < -tol;
  for (std::size_t i = mode + 1; i < bins; ++i) {
    const double diff = dp[i] - dn[i];
    if (diff < -tol) {
      below = true;
    } else if (below && dp[i] > tol) {
      est.tau = grid[i];
      est.crossing = true;
      return est;
    }
  }
  double mn = 0.0, mp = 0.0;
  for (double x : neg) mn += x;
  for (double x : pos) mp += x;
  est.tau = 0.5 * (mn / static_cast<double>(neg.size()) + mp / static_cast<double>(pos.size()));
  return est;
}

struct BaselineResult {
  std::vector<std::string> ids;
  std::vector<int> labels;
  std::vector<double> mu;
  std::vector<double> probabilities;
  std::vector<int> predictions;
  double accuracy = 0.0;
};

/// P = min(tau, mu) / tau per bag, thresholded.
inline BaselineResult baseline_classify(const std::vector<const InstanceBag*>& bags, double tau, bool recalibrate,
                                        double threshold = 0.5, const MagnitudeOptions& opt = {}) {
  if (!(tau > 0.0)) throw DataError("baseline_classify: tau must be positive");
  BaselineResult out;
  std::size_t correct = 0;
  for (const auto* bag : bags) {
    const double mu =
        recalibrate ? mean_magnitude(recalibrate_by_norm_max(bag->features, bag->mask, opt.clamp_negative), bag->mask,
                                     opt.squared)
                    : mean_magnitude(bag->features, bag->mask, opt.squared);
    const double p = bag_probability(mu, tau);
    const int pred = p >= threshold ? 1 : 0;
    out.ids.push_back(bag->id);
    out.labels.push_back(bag->label);
    out.mu.push_back(mu);
    out.probabilities.push_back(p);
    out.predictions.push_back(pred);
    correct += pred == bag->label ? 1 : 0;
  }
  out.accuracy = bags.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(bags.size());
  return out;
}

/// `bag_id,label,mu_raw,mu_recal` with six decimals.
inline void write_density_csv(const fs::path& path, const std::vector<MagnitudeRecord>& records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "bag_id,label,mu_raw,mu_recal\n";
  char buf[128];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof buf, "%d,%.6f,%.6f", r.label, r.mu_raw, r.mu_recal);
    out << r.id << ',' << buf << '\n';
  }
}

}  // namespace frmil
