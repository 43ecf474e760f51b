#pragma once

// Command implementations behind the `frmil` binary. Each command takes a
// plain options struct and an output stream, calls straight into the
// library, and throws frmil errors; `exit_code` maps those to the process
// exit status.

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "frmil/baseline.hpp"
#include "frmil/checkpoint.hpp"
#include "frmil/config.hpp"
#include "frmil/selftest.hpp"
#include "frmil/training.hpp"

namespace frmil::cli {

enum ExitCode : int { kOk = 0, kIo = 1, kUsage = 2, kData = 3 };

inline int exit_code(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return kUsage;
  if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const CheckpointError*>(&e)) return kIo;
  if (auto* s = dynamic_cast<const StoreError*>(&e)) return s->kind() == StoreError::Kind::MissingFile ? kIo : kData;
  if (dynamic_cast<const Error*>(&e)) return kData;
  return kIo;
}

inline std::string fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline std::string auc_text(const std::optional<double>& auc) { return auc ? fixed(*auc) : "NA"; }

inline fs::path default_split_path(const fs::path& data) { return data / "split.json"; }

inline std::vector<const InstanceBag*> bags_of(const BagStore& store, const std::vector<std::string>& ids) {
  std::vector<const InstanceBag*> out;
  out.reserve(ids.size());
  for (const auto& id : ids) out.push_back(&store.at(id));
  return out;
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create " + path.parent_path().string() + ": " + ec.message());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("short write to " + path.string());
}

inline nlohmann::ordered_json read_json_file(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("missing file " + path.string());
  const auto bytes = detail::read_file(path);
  try {
    return nlohmann::ordered_json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("cannot parse " + path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// gen

struct GenOptions {
  fs::path out;
  SyntheticSpec spec;
  std::array<double, 3> fractions{0.6, 0.2, 0.2};
};

inline Split cmd_gen(const GenOptions& o, std::ostream& log) {
  if (o.out.empty()) throw ConfigError("--out is required");
  const auto bags = generate_synthetic(o.spec);
  std::vector<LabeledId> ids;
  for (const auto& b : bags) ids.push_back({b.id, b.label});
  const Split split = split_bags(ids, o.fractions, o.spec.seed);
  write_store(o.out, o.spec.dim, bags);
  write_split(default_split_path(o.out), split);
  const std::size_t pos = o.spec.positive_bags();
  log << "wrote " << bags.size() << " bags (pos " << pos << ", neg " << bags.size() - pos << ", dim " << o.spec.dim
      << ") to " << o.out.string() << "\n"
      << "split train " << split.train.size() << ", val " << split.val.size() << ", test " << split.test.size() << "\n";
  return split;
}

// ---------------------------------------------------------------------------
// tau, baseline, density

struct MagnitudeFlags {
  bool squared = true;
  bool clamp_negative = false;
  MagnitudeOptions options() const { return {squared, clamp_negative}; }
};

/// tau from the train-set density crossing of raw or recalibrated magnitudes.
inline TauEstimate estimate_tau_for(const BagStore& store, const std::vector<std::string>& ids, bool recalibrate,
                                    const MagnitudeOptions& opt) {
  std::vector<double> mu;
  std::vector<int> labels;
  for (const auto& r : magnitude_records(bags_of(store, ids), opt)) {
    mu.push_back(recalibrate ? r.mu_recal : r.mu_raw);
    labels.push_back(r.label);
  }
  return estimate_tau(mu, labels);
}

inline std::string tau_method(const TauEstimate& t) { return t.crossing ? "kde_crossing" : "class_mean_midpoint"; }

struct TauOptions {
  fs::path data;
  fs::path split_file;  // empty: <data>/split.json
  std::string split = "train";
  bool recalibrate = false;
  fs::path out;
  MagnitudeFlags magnitude;
};

inline TauEstimate cmd_tau(const TauOptions& o, std::ostream& log) {
  const BagStore store = read_store(o.data);
  const Split split = read_split(o.split_file.empty() ? default_split_path(o.data) : o.split_file);
  const TauEstimate t = estimate_tau_for(store, split.named(o.split), o.recalibrate, o.magnitude.options());
  nlohmann::ordered_json j{{"tau", t.tau}, {"method", tau_method(t)}, {"recalibrated", o.recalibrate}};
  if (!o.out.empty()) write_text(o.out, j.dump(2) + "\n");
  log << j.dump() << "\n";
  return t;
}

struct BaselineOptions {
  fs::path data;
  fs::path split_file;
  std::string split = "test";
  std::optional<double> tau;  // applies to the selected mode; otherwise estimated on train
  bool recalibrate = false;
  fs::path out;               // per-bag CSV
  double threshold = 0.5;
  MagnitudeFlags magnitude;
};

struct BaselineReport {
  BaselineResult raw, recal;
  double tau_raw = 0.0, tau_recal = 0.0;
  const BaselineResult& selected(bool recalibrate) const { return recalibrate ? recal : raw; }
};

inline BaselineReport cmd_baseline(const BaselineOptions& o, std::ostream& log) {
  const BagStore store = read_store(o.data);
  const Split split = read_split(o.split_file.empty() ? default_split_path(o.data) : o.split_file);
  const auto opt = o.magnitude.options();
  const auto bags = bags_of(store, split.named(o.split));
  BaselineReport rep;
  auto tau_for = [&](bool recal) {
    if (o.tau && recal == o.recalibrate) return *o.tau;
    return estimate_tau_for(store, split.train, recal, opt).tau;
  };
  rep.tau_raw = tau_for(false);
  rep.tau_recal = tau_for(true);
  rep.raw = baseline_classify(bags, rep.tau_raw, false, o.threshold, opt);
  rep.recal = baseline_classify(bags, rep.tau_recal, true, o.threshold, opt);

  if (!o.out.empty()) {
    std::string csv = "bag_id,label,mu_raw,p_raw,pred_raw,mu_recal,p_recal,pred_recal\n";
    char buf[160];
    for (std::size_t i = 0; i < bags.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%d,%.6f,%.6f,%d,%.6f,%.6f,%d", rep.raw.labels[i], rep.raw.mu[i],
                    rep.raw.probabilities[i], rep.raw.predictions[i], rep.recal.mu[i], rep.recal.probabilities[i],
                    rep.recal.predictions[i]);
      csv += rep.raw.ids[i] + "," + buf + "\n";
    }
    write_text(o.out, csv);
  }
  log << "split " << o.split << " (" << bags.size() << " bags)\n"
      << "          tau         acc\n"
      << "raw       " << fixed(rep.tau_raw) << "  " << fixed(rep.raw.accuracy) << "\n"
      << "recal     " << fixed(rep.tau_recal) << "  " << fixed(rep.recal.accuracy) << "\n"
      << "accuracy " << fixed(rep.selected(o.recalibrate).accuracy) << " ("
      << (o.recalibrate ? "recalibrated" : "raw") << ")\n";
  return rep;
}

struct DensityOptions {
  fs::path data;
  fs::path out;
  MagnitudeFlags magnitude;
};

inline std::vector<MagnitudeRecord> cmd_density(const DensityOptions& o, std::ostream& log) {
  if (o.out.empty()) throw ConfigError("--out is required");
  const BagStore store = read_store(o.data);
  std::vector<const InstanceBag*> bags;
  for (const auto& b : store.bags) bags.push_back(&b);
  auto records = magnitude_records(bags, o.magnitude.options());
  write_density_csv(o.out, records);
  log << "wrote " << records.size() << " rows to " << o.out.string() << "\n";
  return records;
}

// ---------------------------------------------------------------------------
// train, eval, ablate

/// A training run's inputs: config file (optional) plus flag overrides as a
/// JSON object. Precedence: defaults < FRMIL_SEED < file < flags.
struct RunOptions {
  fs::path data;
  fs::path config_file;
  fs::path split_file;
  fs::path out;
  nlohmann::ordered_json overrides = nlohmann::ordered_json::object();
  bool quiet = false;
};

struct ResolvedRun {
  TrainConfig config;
  fs::path data;
  fs::path split_file;
  fs::path out;
};

inline ResolvedRun resolve_run(const RunOptions& o) {
  ResolvedRun r;
  TrainConfig base;
  base.seed = default_seed();
  nlohmann::ordered_json file = nlohmann::ordered_json::object();
  if (!o.config_file.empty()) file = read_json_file(o.config_file);
  r.config = config_from_json(file, base, {"data", "out", "split_file"});
  r.config = config_from_json(o.overrides, r.config);
  auto path_key = [&](const fs::path& flag, const char* key) -> fs::path {
    if (!flag.empty()) return flag;
    if (file.contains(key)) {
      if (!file[key].is_string()) throw ConfigError(std::string("configuration key '") + key + "' must be a string");
      return file[key].get<std::string>();
    }
    return {};
  };
  r.data = path_key(o.data, "data");
  r.out = path_key(o.out, "out");
  r.split_file = path_key(o.split_file, "split_file");
  if (r.data.empty()) throw ConfigError("no data directory given (--data or \"data\" in the config file)");
  if (r.out.empty()) throw ConfigError("no run directory given (--out or \"out\" in the config file)");
  if (r.split_file.empty()) r.split_file = default_split_path(r.data);
  return r;
}

inline nlohmann::ordered_json config_echo(const ResolvedRun& r) {
  nlohmann::ordered_json j = r.config;
  j["data"] = r.data.string();
  j["split_file"] = r.split_file.string();
  return j;
}

inline void print_epoch(std::ostream& log, const EpochMetrics& m) {
  log << "epoch " << m.epoch << " " << m.split << " loss " << fixed(m.loss.total) << " acc " << fixed(m.accuracy)
      << " auc " << auc_text(m.auc) << "\n";
}

struct TrainOutcome {
  TrainResult result;
  EvalReport test;  // final parameters on the test split
};

/// Trains one model into `run_dir`: config.json, metrics.csv, final.ckpt,
/// best.ckpt, and scores_test.csv from the final parameters.
inline TrainOutcome train_into(const BagStore& store, const Split& split, const ResolvedRun& r, const fs::path& run_dir,
                               std::ostream& log, bool quiet) {
  std::error_code ec;
  fs::create_directories(run_dir, ec);
  if (ec) throw IoError("cannot create run directory " + run_dir.string() + ": " + ec.message());
  ResolvedRun echo = r;
  echo.out = run_dir;
  write_text(run_dir / "config.json", config_echo(echo).dump(2) + "\n");

  TrainOutcome o;
  o.result = train(store, split, r.config, [&](const EpochMetrics& m) {
    if (!quiet) print_epoch(log, m);
  });
  write_text(run_dir / "metrics.csv", metrics_csv(o.result.log));
  save_checkpoint(o.result.params, r.config, run_dir / "final.ckpt");
  save_checkpoint(o.result.best_params, r.config, run_dir / "best.ckpt");
  if (!split.test.empty()) {
    o.test = evaluate(store, split.test, o.result.params, r.config, "test");
    write_scores_csv(run_dir / "scores_test.csv", o.test);
  }
  return o;
}

inline TrainOutcome cmd_train(const RunOptions& opts, std::ostream& log) {
  const ResolvedRun r = resolve_run(opts);
  const BagStore store = read_store(r.data);
  const Split split = read_split(r.split_file);
  auto o = train_into(store, split, r, r.out, log, opts.quiet);
  if (!split.test.empty()) {
    log << "test ACC " << fixed(o.test.accuracy) << " AUC " << auc_text(o.test.auc) << "\n";
  }
  return o;
}

struct EvalOptions {
  fs::path data;
  fs::path ckpt;
  fs::path split_file;
  std::string split = "test";
  fs::path out;  // empty: scores_<split>.csv next to the checkpoint
};

inline EvalReport cmd_eval(const EvalOptions& o, std::ostream& log) {
  const Checkpoint ck = load_checkpoint(o.ckpt);
  const BagStore store = read_store(o.data);
  if (store.dim != ck.params.dim) {
    throw DataError("checkpoint dim " + std::to_string(ck.params.dim) + " differs from store dim " +
                    std::to_string(store.dim));
  }
  const Split split = read_split(o.split_file.empty() ? default_split_path(o.data) : o.split_file);
  EvalReport rep = evaluate(store, split.named(o.split), ck.params, ck.config, o.split);
  const fs::path out = o.out.empty() ? o.ckpt.parent_path() / ("scores_" + o.split + ".csv") : o.out;
  write_scores_csv(out, rep);
  log << "ACC " << fixed(rep.accuracy, 6) << " AUC " << (rep.auc ? fixed(*rep.auc, 6) : "NA") << "\n";
  return rep;
}

struct AblationRow {
  std::string name;
  double accuracy = 0.0;
  std::optional<double> auc;
};

/// The four loss configurations, in table order.
inline std::vector<std::pair<std::string, std::array<bool, 3>>> ablation_configs() {
  return {{"bag", {true, false, false}},
          {"bag+fm", {true, false, true}},
          {"bag+max", {true, true, false}},
          {"bag+max+fm", {true, true, true}}};
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out = "config,acc,auc\n";
  char buf[96];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.6f,", r.accuracy);
    out += r.name + "," + buf + (r.auc ? fixed(*r.auc, 6) : "NA") + "\n";
  }
  return out;
}

inline std::vector<AblationRow> cmd_ablate(const RunOptions& opts, std::ostream& log) {
  const ResolvedRun base = resolve_run(opts);
  const BagStore store = read_store(base.data);
  const Split split = read_split(base.split_file);
  if (split.test.empty()) throw DataError("ablation needs a non-empty test split");
  std::vector<AblationRow> rows;
  for (const auto& [name, on] : ablation_configs()) {
    ResolvedRun r = base;
    r.config.use_bag_loss = on[0];
    r.config.use_max_loss = on[1];
    r.config.use_fm_loss = on[2];
    if (!opts.quiet) log << "== " << name << "\n";
    const auto o = train_into(store, split, r, base.out / name, log, opts.quiet);
    rows.push_back({name, o.test.accuracy, o.test.auc});
    log << name << " ACC " << fixed(o.test.accuracy) << " AUC " << auc_text(o.test.auc) << "\n";
  }
  write_text(base.out / "ablation.csv", ablation_csv(rows));
  return rows;
}

// ---------------------------------------------------------------------------
// selftest

inline bool cmd_selftest(std::ostream& log) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto results = run_selftest();
  bool ok = true;
  char buf[256];
  for (const auto& c : results) {
    std::snprintf(buf, sizeof buf, "%-4s %-40s observed %.3e  tolerance %.1e", c.passed ? "ok" : "FAIL",
                  c.name.c_str(), c.observed, c.tolerance);
    log << buf << "\n";
    ok = ok && c.passed;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  log << (ok ? "all " : "FAILED: ") << results.size() << " checks, " << fixed(secs, 2) << " s\n";
  return ok;
}

}  // namespace frmil::cli
