#pragma once

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <string>

#include <nlohmann/json.hpp>

#include "frmil/error.hpp"
#include "frmil/model.hpp"
#include "frmil/objectives.hpp"

namespace frmil {

/// Every training hyperparameter. Defaults follow the reference setup:
/// Adam at 1e-4 for 100 epochs, 20% dropout, 8 heads, equal loss weights.
struct TrainConfig {
  double tau = 8.48;
  double gamma_bag = 0.33;
  double gamma_max = 0.33;
  double gamma_fm = 0.33;
  bool use_bag_loss = true;
  bool use_max_loss = true;
  bool use_fm_loss = true;
  double lr = 1e-4;
  int epochs = 100;
  std::size_t heads = 8;
  double dropout = 0.2;
  std::size_t dim = 0;  // 0: take it from the store
  std::uint64_t seed = 0;
  bool baseline_norm_squared = true;
  bool fm_norm_squared = false;
  bool pem_residual = true;
  bool embed_instances = true;
  double ln_eps = 1e-5;

  LossWeights weights() const {
    return {use_bag_loss ? gamma_bag : 0.0, use_max_loss ? gamma_max : 0.0, use_fm_loss ? gamma_fm : 0.0, tau};
  }

  ModelOptions model_options() const { return {dropout, pem_residual, ln_eps, embed_instances}; }

  void validate() const {
    weights().validate();
    for (double g : {gamma_bag, gamma_max, gamma_fm})
      if (!std::isfinite(g) || g < 0) throw ConfigError("loss weights must be finite and nonnegative");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("learning rate must be positive");
    if (epochs < 0) throw ConfigError("epochs must be nonnegative");
    if (heads == 0) throw ConfigError("head count must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
    if (dim != 0 && dim % heads != 0) {
      throw ConfigError("dim " + std::to_string(dim) + " is not divisible by " + std::to_string(heads) + " heads");
    }
    if (!(ln_eps > 0.0)) throw ConfigError("layer-norm eps must be positive");
  }
};

inline void to_json(nlohmann::ordered_json& j, const TrainConfig& c) {
  j = nlohmann::ordered_json{{"tau", c.tau},
                             {"gamma_bag", c.gamma_bag},
                             {"gamma_max", c.gamma_max},
                             {"gamma_fm", c.gamma_fm},
                             {"use_bag_loss", c.use_bag_loss},
                             {"use_max_loss", c.use_max_loss},
                             {"use_fm_loss", c.use_fm_loss},
                             {"lr", c.lr},
                             {"epochs", c.epochs},
                             {"heads", c.heads},
                             {"dropout", c.dropout},
                             {"dim", c.dim},
                             {"seed", c.seed},
                             {"baseline_norm_squared", c.baseline_norm_squared},
                             {"fm_norm_squared", c.fm_norm_squared},
                             {"pem_residual", c.pem_residual},
                             {"embed_instances", c.embed_instances},
                             {"ln_eps", c.ln_eps}};
}

/// Applies the keys present in `j` on top of `base`. Unknown keys and
/// mistyped values are rejected; `extra_keys` lists names the caller
/// handles itself (they are skipped here).
template <class Json>
TrainConfig config_from_json(const Json& j, TrainConfig base = {}, std::initializer_list<const char*> extra_keys = {}) {
  if (!j.is_object()) throw ConfigError("configuration must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& key = it.key();
    const auto& v = it.value();
    try {
      if (key == "tau") base.tau = v.template get<double>();
      else if (key == "gamma_bag") base.gamma_bag = v.template get<double>();
      else if (key == "gamma_max") base.gamma_max = v.template get<double>();
      else if (key == "gamma_fm") base.gamma_fm = v.template get<double>();
      else if (key == "use_bag_loss") base.use_bag_loss = v.template get<bool>();
      else if (key == "use_max_loss") base.use_max_loss = v.template get<bool>();
      else if (key == "use_fm_loss") base.use_fm_loss = v.template get<bool>();
      else if (key == "lr") base.lr = v.template get<double>();
      else if (key == "epochs") base.epochs = v.template get<int>();
      else if (key == "heads") base.heads = v.template get<std::size_t>();
      else if (key == "dropout") base.dropout = v.template get<double>();
      else if (key == "dim") base.dim = v.template get<std::size_t>();
      else if (key == "seed") base.seed = v.template get<std::uint64_t>();
      else if (key == "baseline_norm_squared") base.baseline_norm_squared = v.template get<bool>();
      else if (key == "fm_norm_squared") base.fm_norm_squared = v.template get<bool>();
      else if (key == "pem_residual") base.pem_residual = v.template get<bool>();
      else if (key == "embed_instances") base.embed_instances = v.template get<bool>();
      else if (key == "ln_eps") base.ln_eps = v.template get<double>();
      else {
        bool known = false;
        for (const char* k : extra_keys) known = known || key == k;
        if (!known) throw ConfigError("unknown configuration key '" + key + "'");
      }
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("configuration key '" + key + "' has the wrong type");
    }
  }
  base.validate();
  return base;
}

/// Seed default: FRMIL_SEED when set, else 0.
inline std::uint64_t default_seed() {
  if (const char* s = std::getenv("FRMIL_SEED")) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(s, &end, 10);
    if (end == s || *end != '\0') throw ConfigError(std::string("FRMIL_SEED is not an integer: ") + s);
    return v;
  }
  return 0;
}

}  // namespace frmil
