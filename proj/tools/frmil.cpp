#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "frmil/cli.hpp"

namespace {

using frmil::cli::RunOptions;
using json = nlohmann::ordered_json;

/// Training flags that override config-file keys. Only flags actually given
/// on the command line end up in the override object.
struct TrainFlags {
  std::optional<double> tau, gamma_bag, gamma_max, gamma_fm, lr, dropout, ln_eps;
  std::optional<int> epochs;
  std::optional<std::size_t> heads;
  std::optional<std::uint64_t> seed;
  bool no_bag = false, no_max = false, no_fm = false, fm_squared = false, no_pem_residual = false, no_embed = false;

  void attach(CLI::App* app) {
    app->add_option("--tau", tau, "feature-magnitude margin");
    app->add_option("--gamma-bag", gamma_bag, "weight of the bag loss");
    app->add_option("--gamma-max", gamma_max, "weight of the max-instance loss");
    app->add_option("--gamma-fm", gamma_fm, "weight of the feature-magnitude loss");
    app->add_option("--lr", lr, "Adam learning rate");
    app->add_option("--epochs", epochs, "training epochs");
    app->add_option("--heads", heads, "attention heads");
    app->add_option("--dropout", dropout, "dropout rate");
    app->add_option("--ln-eps", ln_eps, "layer-norm epsilon");
    app->add_option("--seed", seed, "random seed (default: FRMIL_SEED or 0)");
    app->add_flag("--no-bag-loss", no_bag, "disable the bag loss");
    app->add_flag("--no-max-loss", no_max, "disable the max-instance loss");
    app->add_flag("--no-fm-loss", no_fm, "disable the feature-magnitude loss");
    app->add_flag("--fm-norm-squared", fm_squared, "use squared norms in the feature-magnitude loss");
    app->add_flag("--no-pem-residual", no_pem_residual, "drop the residual around the positional convolution");
    app->add_flag("--no-embed", no_embed, "feed raw features to the scorer (no instance embedding)");
  }

  json overrides() const {
    json j = json::object();
    auto put = [&](const char* key, const auto& v) {
      if (v) j[key] = *v;
    };
    put("tau", tau), put("gamma_bag", gamma_bag), put("gamma_max", gamma_max), put("gamma_fm", gamma_fm);
    put("lr", lr), put("dropout", dropout), put("ln_eps", ln_eps), put("epochs", epochs), put("heads", heads);
    put("seed", seed);
    if (no_bag) j["use_bag_loss"] = false;
    if (no_max) j["use_max_loss"] = false;
    if (no_fm) j["use_fm_loss"] = false;
    if (fm_squared) j["fm_norm_squared"] = true;
    if (no_pem_residual) j["pem_residual"] = false;
    if (no_embed) j["embed_instances"] = false;
    return j;
  }
};

void magnitude_flags(CLI::App* app, frmil::cli::MagnitudeFlags& m, bool& unsquared) {
  app->add_flag("--unsquared", unsquared, "use plain instead of squared norms for mu");
  app->add_flag("--clamp-negative", m.clamp_negative, "apply ReLU after subtracting the max-norm row");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Feature re-calibration MIL: data, baseline, training and evaluation tools"};
  app.require_subcommand(1);

  frmil::cli::GenOptions gen;
  std::uint64_t gen_seed = 0;
  auto* c_gen = app.add_subcommand("gen", "generate a synthetic bag store and a default split");
  c_gen->add_option("--out", gen.out, "output directory")->required();
  c_gen->add_option("--bags", gen.spec.n_bags, "number of bags");
  c_gen->add_option("--dim", gen.spec.dim, "feature dimension");
  c_gen->add_option("--bag-min", gen.spec.bag_min, "smallest bag size");
  c_gen->add_option("--bag-max", gen.spec.bag_max, "largest bag size");
  c_gen->add_option("--witness-rate", gen.spec.witness_rate, "fraction of witness instances in positive bags");
  c_gen->add_option("--pos-frac", gen.spec.pos_frac, "fraction of positive bags");
  c_gen->add_option("--separation", gen.spec.separation, "witness shift along the signal direction");
  c_gen->add_option("--noise", gen.spec.noise, "instance noise standard deviation");
  auto* gen_seed_opt = c_gen->add_option("--seed", gen_seed, "random seed (default: FRMIL_SEED or 0)");

  frmil::cli::TauOptions tau;
  bool tau_unsquared = false;
  auto* c_tau = app.add_subcommand("tau", "estimate the margin from class magnitude densities");
  c_tau->add_option("--data", tau.data, "bag store directory")->required();
  c_tau->add_option("--split", tau.split, "split to estimate on")->check(CLI::IsMember({"train", "val", "test"}));
  c_tau->add_option("--split-file", tau.split_file, "split JSON (default: <data>/split.json)");
  c_tau->add_flag("--recalibrate", tau.recalibrate, "use recalibrated magnitudes");
  c_tau->add_option("--out", tau.out, "write the estimate as JSON");
  magnitude_flags(c_tau, tau.magnitude, tau_unsquared);

  frmil::cli::BaselineOptions base;
  bool base_unsquared = false;
  auto* c_base = app.add_subcommand("baseline", "non-parametric magnitude classifier, raw and recalibrated");
  c_base->add_option("--data", base.data, "bag store directory")->required();
  c_base->add_option("--split", base.split, "split to classify")->check(CLI::IsMember({"train", "val", "test"}));
  c_base->add_option("--split-file", base.split_file, "split JSON (default: <data>/split.json)");
  c_base->add_option("--tau", base.tau, "margin for the selected mode (default: estimated on train)");
  c_base->add_flag("--recalibrate", base.recalibrate, "report the recalibrated variant as the headline");
  c_base->add_option("--threshold", base.threshold, "decision threshold on the probability");
  c_base->add_option("--out", base.out, "per-bag CSV");
  magnitude_flags(c_base, base.magnitude, base_unsquared);

  frmil::cli::DensityOptions dens;
  bool dens_unsquared = false;
  auto* c_dens = app.add_subcommand("density", "export per-bag raw and recalibrated magnitudes");
  c_dens->add_option("--data", dens.data, "bag store directory")->required();
  c_dens->add_option("--out", dens.out, "output CSV")->required();
  magnitude_flags(c_dens, dens.magnitude, dens_unsquared);

  RunOptions train_opts, ablate_opts;
  TrainFlags train_flags, ablate_flags;
  auto run_command = [](CLI::App* c, RunOptions& o, TrainFlags& f) {
    c->add_option("--data", o.data, "bag store directory");
    c->add_option("--config", o.config_file, "JSON config file (flags win)");
    c->add_option("--split-file", o.split_file, "split JSON (default: <data>/split.json)");
    c->add_option("--out", o.out, "run directory");
    c->add_flag("--quiet", o.quiet, "suppress per-epoch lines");
    f.attach(c);
  };
  auto* c_train = app.add_subcommand("train", "train a model; writes metrics and checkpoints");
  run_command(c_train, train_opts, train_flags);
  auto* c_ablate = app.add_subcommand("ablate", "train the four loss configurations and tabulate test metrics");
  run_command(c_ablate, ablate_opts, ablate_flags);

  frmil::cli::EvalOptions eval;
  auto* c_eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  c_eval->add_option("--data", eval.data, "bag store directory")->required();
  c_eval->add_option("--ckpt", eval.ckpt, "checkpoint file")->required();
  c_eval->add_option("--split", eval.split, "split to evaluate")->check(CLI::IsMember({"train", "val", "test"}));
  c_eval->add_option("--split-file", eval.split_file, "split JSON (default: <data>/split.json)");
  c_eval->add_option("--out", eval.out, "per-bag scores CSV (default: next to the checkpoint)");

  auto* c_self = app.add_subcommand("selftest", "gradient checks and oracle comparisons");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : frmil::cli::kUsage;
  }

  try {
    if (*c_gen) {
      gen.spec.seed = *gen_seed_opt ? gen_seed : frmil::default_seed();
      frmil::cli::cmd_gen(gen, std::cout);
    } else if (*c_tau) {
      tau.magnitude.squared = !tau_unsquared;
      frmil::cli::cmd_tau(tau, std::cout);
    } else if (*c_base) {
      base.magnitude.squared = !base_unsquared;
      frmil::cli::cmd_baseline(base, std::cout);
    } else if (*c_dens) {
      dens.magnitude.squared = !dens_unsquared;
      frmil::cli::cmd_density(dens, std::cout);
    } else if (*c_train) {
      train_opts.overrides = train_flags.overrides();
      frmil::cli::cmd_train(train_opts, std::cout);
    } else if (*c_ablate) {
      ablate_opts.overrides = ablate_flags.overrides();
      frmil::cli::cmd_ablate(ablate_opts, std::cout);
    } else if (*c_eval) {
      frmil::cli::cmd_eval(eval, std::cout);
    } else if (*c_self) {
      return frmil::cli::cmd_selftest(std::cout) ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::cerr << "frmil: " << e.what() << "\n";
    return frmil::cli::exit_code(e);
  }
  return 0;
}
