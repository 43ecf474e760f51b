#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "frmil/adam.hpp"
#include "frmil/bag_data.hpp"
#include "frmil/config.hpp"
#include "frmil/metrics.hpp"
#include "frmil/model.hpp"
#include "frmil/objectives.hpp"

namespace frmil {

struct BagScore {
  std::string id;
  int label = 0;
  double probability = 0.0;
};

struct LossSummary {
  double total = 0.0, bag = 0.0, max = 0.0, fm = 0.0;
};

struct EvalReport {
  std::string split;
  double accuracy = 0.0;
  std::optional<double> auc;  // empty when the split holds a single class
  std::vector<BagScore> rows;
  LossSummary loss;
};

struct EpochMetrics {
  int epoch = 0;
  std::string split;
  LossSummary loss;
  double accuracy = 0.0;
  std::optional<double> auc;
};

struct TrainResult {
  ModelParams<float> params;       // after the final epoch
  ModelParams<float> best_params;  // best validation AUC (final params when no val split)
  std::optional<double> best_val_auc;
  std::vector<EpochMetrics> log;
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint32_t tag) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a),    static_cast<std::uint32_t>(b),
                    tag};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

/// Runs fn(i) for i in [0, n) across hardware threads. Each index writes
/// its own slot, so results do not depend on scheduling.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const std::size_t workers = std::min<std::size_t>(n, std::max(1u, std::thread::hardware_concurrency()));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline std::vector<Tensor<float>*> param_list(ModelSlots<Tensor<float>>& p) {
  std::vector<Tensor<float>*> out;
  p.for_each([&](const char*, Tensor<float>& t) { out.push_back(&t); });
  return out;
}

inline std::vector<Tensor<float>*> param_list(ComparatorSlots<Tensor<float>>& p) {
  return {&p.w, &p.b};
}

inline void fill_metrics(EvalReport& r) {
  std::vector<double> s;
  std::vector<int> y;
  for (const auto& row : r.rows) s.push_back(row.probability), y.push_back(row.label);
  r.accuracy = accuracy(s, y);
  const bool both = std::count(y.begin(), y.end(), 1) > 0 && std::count(y.begin(), y.end(), 0) > 0;
  r.auc = both ? std::optional<double>(auc(s, y)) : std::nullopt;
}

}  // namespace detail

/// Evaluation-mode scores for `ids`. The loss summary averages bag and
/// max-instance BCE over bags and adds the per-class means of the
/// feature-magnitude terms.
inline EvalReport evaluate(const BagStore& store, const std::vector<std::string>& ids, const ModelParams<float>& params,
                           const TrainConfig& config, const std::string& split_name = "eval") {
  if (ids.empty()) throw DataError("evaluate: no bags in split '" + split_name + "'");
  struct Item {
    double prob, score_max, fm_term;
  };
  std::vector<Item> items(ids.size());
  const auto opts = config.model_options();
  const double tau = config.tau;
  detail::parallel_for(ids.size(), [&](std::size_t i) {
    const InstanceBag& bag = store.at(ids[i]);
    Tape<float> tape;
    auto bound = bind(tape, params, false);
    auto tr = forward(tape.constant(bag.features), bag.mask, bound, params.heads, opts, RunMode{});
    auto norms = l2_norm_rows(tr.recalibrated, config.fm_norm_squared);
    Var<float> term = bag.label ? relu(add_scalar(scale(norms, -1.0f), static_cast<float>(tau))) : norms;
    items[i] = {tr.probability(), static_cast<double>(tr.score_max.value().item()),
                static_cast<double>(masked_reduce(Reduce::Mean, term, bag.mask, 0).value().item())};
  });

  EvalReport r;
  r.split = split_name;
  double fm_pos = 0, fm_neg = 0;
  std::size_t n_pos = 0, n_neg = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const int y = store.at(ids[i]).label;
    r.rows.push_back({ids[i], y, items[i].prob});
    r.loss.bag += bce_loss(items[i].prob, y);
    r.loss.max += bce_loss(items[i].score_max, y);
    (y ? fm_pos : fm_neg) += items[i].fm_term;
    (y ? n_pos : n_neg) += 1;
  }
  const auto n = static_cast<double>(ids.size());
  r.loss.bag /= n;
  r.loss.max /= n;
  r.loss.fm = (n_pos ? fm_pos / static_cast<double>(n_pos) : 0.0) + (n_neg ? fm_neg / static_cast<double>(n_neg) : 0.0);
  const auto w = config.weights();
  if (w.gamma_max == 0) r.loss.max = 0;
  if (w.gamma_fm == 0) r.loss.fm = 0;
  r.loss.total = w.gamma_bag * r.loss.bag + w.gamma_max * r.loss.max + w.gamma_fm * r.loss.fm;
  detail::fill_metrics(r);
  return r;
}

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Balanced-batch training: every step forwards one positive and one
/// negative bag, backpropagates the weighted loss and takes one Adam step.
/// Bitwise deterministic for a given store, split and config.
inline TrainResult train(const BagStore& store, const Split& split, const TrainConfig& config,
                         const EpochCallback& on_epoch = {}) {
  config.validate();
  if (store.dim == 0) throw DataError("train: empty store");
  if (config.dim != 0 && config.dim != store.dim) {
    throw ConfigError("config dim " + std::to_string(config.dim) + " differs from store dim " +
                      std::to_string(store.dim));
  }
  const auto train_ids = labeled_ids(store, split.train);
  TrainResult result;
  result.params = init_params<float>(store.dim, config.heads, config.seed);
  result.best_params = result.params;
  AdamState<float> adam;
  const auto weights = config.weights();
  const auto opts = config.model_options();

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto batches = balanced_batches(train_ids, config.seed, static_cast<std::uint64_t>(epoch));
    LossSummary sum;
    std::map<std::string, BagScore> seen;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const InstanceBag& pos = store.at(batches[b].first);
      const InstanceBag& neg = store.at(batches[b].second);
      std::mt19937_64 rng(detail::mix_seed(config.seed, static_cast<std::uint64_t>(epoch), b, 0x64726f70u));
      Tape<float> tape;
      auto bound = bind(tape, result.params);
      RunMode mode{true, &rng};
      auto tp = forward(tape.constant(pos.features), pos.mask, bound, result.params.heads, opts, mode);
      auto tn = forward(tape.constant(neg.features), neg.mask, bound, result.params.heads, opts, mode);
      auto terms = total_loss(tp, 1, tn, 0, weights, config.fm_norm_squared);
      if (!std::isfinite(terms.total_value())) {
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + " on bags " + pos.id + ", " + neg.id);
      }
      tape.backward(terms.total);
      auto grads = collect_grads<float, ModelSlots<Tensor<float>>>(bound);
      std::vector<Tensor<float>> grad_list;
      grads.for_each([&](const char*, Tensor<float>& g) { grad_list.push_back(std::move(g)); });
      auto plist = detail::param_list(result.params);
      try {
        adam_step<float>(plist, grad_list, adam, config.lr);
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " (epoch " + std::to_string(epoch) + ", bags " + pos.id + ", " +
                           neg.id + ")");
      }
      if (!result.params.all_finite()) {
        throw NumericError("non-finite parameter after epoch " + std::to_string(epoch) + " step on bags " + pos.id +
                           ", " + neg.id);
      }
      sum.total += terms.total_value();
      sum.bag += terms.bag_value();
      sum.max += weights.gamma_max != 0 ? terms.max_value() : 0.0;
      sum.fm += weights.gamma_fm != 0 ? terms.fm_value() : 0.0;
      seen[pos.id] = {pos.id, 1, tp.probability()};
      seen[neg.id] = {neg.id, 0, tn.probability()};
    }

    const auto nb = static_cast<double>(batches.size());
    EpochMetrics tm{epoch, "train", {sum.total / nb, sum.bag / nb, sum.max / nb, sum.fm / nb}, 0.0, std::nullopt};
    EvalReport running;
    for (auto& [id, s] : seen) running.rows.push_back(s);
    detail::fill_metrics(running);
    tm.accuracy = running.accuracy;
    tm.auc = running.auc;
    result.log.push_back(tm);
    if (on_epoch) on_epoch(tm);

    if (!split.val.empty()) {
      const auto vr = evaluate(store, split.val, result.params, config, "val");
      EpochMetrics vm{epoch, "val", vr.loss, vr.accuracy, vr.auc};
      result.log.push_back(vm);
      if (on_epoch) on_epoch(vm);
      if (vr.auc && (!result.best_val_auc || *vr.auc > *result.best_val_auc)) {
        result.best_val_auc = vr.auc;
        result.best_params = result.params;
      }
    }
  }
  if (split.val.empty()) result.best_params = result.params;
  return result;
}

inline std::string format_metrics_row(const EpochMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%d,%s,%.6f,%.6f,%.6f,%.6f,%.6f,", m.epoch, m.split.c_str(), m.loss.total,
                m.loss.bag, m.loss.max, m.loss.fm, m.accuracy);
  std::string row = buf;
  if (m.auc) {
    std::snprintf(buf, sizeof buf, "%.6f", *m.auc);
    row += buf;
  } else {
    row += "NA";
  }
  return row;
}

inline std::string metrics_csv(const std::vector<EpochMetrics>& log) {
  std::string out = "epoch,split,loss,loss_bag,loss_max,loss_fm,acc,auc\n";
  for (const auto& m : log) out += format_metrics_row(m) + '\n';
  return out;
}

inline void write_scores_csv(const fs::path& path, const EvalReport& r) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "bag_id,label,probability\n";
  char buf[64];
  for (const auto& row : r.rows) {
    std::snprintf(buf, sizeof buf, "%d,%.6f", row.label, row.probability);
    out << row.id << ',' << buf << '\n';
  }
}

// ---------------------------------------------------------------------------
// Comparators

/// Trains a mean- or max-pooling head with bag BCE on the same balanced
/// batches and optimiser settings as the main model.
inline ComparatorSlots<Tensor<float>> train_comparator(const BagStore& store, const Split& split, PoolKind kind,
                                                       const TrainConfig& config) {
  config.validate();
  const auto train_ids = labeled_ids(store, split.train);
  auto params = init_comparator<float>(store.dim, config.seed);
  AdamState<float> adam;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    for (const auto& [pid, nid] : balanced_batches(train_ids, config.seed, static_cast<std::uint64_t>(epoch))) {
      const InstanceBag& pos = store.at(pid);
      const InstanceBag& neg = store.at(nid);
      Tape<float> tape;
      ComparatorSlots<Var<float>> bound{tape.parameter(params.w), tape.parameter(params.b)};
      auto pp = comparator_forward(kind, tape.constant(pos.features), pos.mask, bound);
      auto pn = comparator_forward(kind, tape.constant(neg.features), neg.mask, bound);
      auto loss = scale(add(bce_loss(pp, 1), bce_loss(pn, 0)), 0.5f);
      tape.backward(loss);
      std::vector<Tensor<float>> grads{bound.w.grad(), bound.b.grad()};
      auto plist = detail::param_list(params);
      adam_step<float>(plist, grads, adam, config.lr);
    }
  }
  return params;
}

inline EvalReport evaluate_comparator(const BagStore& store, const std::vector<std::string>& ids, PoolKind kind,
                                      const ComparatorSlots<Tensor<float>>& params, const std::string& split_name) {
  if (ids.empty()) throw DataError("evaluate_comparator: no bags in split '" + split_name + "'");
  std::vector<double> probs(ids.size());
  detail::parallel_for(ids.size(), [&](std::size_t i) {
    const InstanceBag& bag = store.at(ids[i]);
    Tape<float> tape;
    ComparatorSlots<Var<float>> bound{tape.constant(params.w), tape.constant(params.b)};
    probs[i] = static_cast<double>(comparator_forward(kind, tape.constant(bag.features), bag.mask, bound).value().item());
  });
  EvalReport r;
  r.split = split_name;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const int y = store.at(ids[i]).label;
    r.rows.push_back({ids[i], y, probs[i]});
    r.loss.bag += bce_loss(probs[i], y);
  }
  r.loss.bag /= static_cast<double>(ids.size());
  r.loss.total = r.loss.bag;
  detail::fill_metrics(r);
  return r;
}

}  // namespace frmil
