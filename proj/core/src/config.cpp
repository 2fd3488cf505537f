#include "fedl2p/config.hpp"

#include <fstream>
#include <set>

#include <json.hpp>

#include "fedl2p/rng.hpp"

namespace fedl2p {

using nlohmann::json;

namespace {

void check_keys(const json& obj, const std::string& section,
                const std::set<std::string>& allowed) {
  if (!obj.is_object()) throw ConfigError(section + ": expected an object");
  for (auto it = obj.begin(); it != obj.end(); ++it)
    if (!allowed.count(it.key()))
      throw ConfigError(section + ": unknown key '" + it.key() + "'");
}

template <typename T>
void get(const json& obj, const char* key, T& out) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("bad value for '") + key + "'");
  }
}

void require_pos(double v, const char* key) {
  if (!(v > 0)) throw ConfigError(std::string("'") + key + "' must be > 0");
}

void require_nonstrict_pos(double v, const char* key) {
  if (v < 0) throw ConfigError(std::string("'") + key + "' must be >= 0");
}

void parse_hg(const json& obj, HypergradConfig& hg) {
  check_keys(obj, "hypergrad",
             {"neumann_iters", "neumann_lr", "clip", "zeta_bn", "zeta_lr",
              "zeta_eta_tilde", "fd_step", "hvp_step"});
  get(obj, "neumann_iters", hg.neumann_iters);
  get(obj, "neumann_lr", hg.neumann_lr);
  get(obj, "clip", hg.clip);
  get(obj, "zeta_bn", hg.zeta_bn);
  get(obj, "zeta_lr", hg.zeta_lr);
  get(obj, "zeta_eta_tilde", hg.zeta_eta_tilde);
  get(obj, "fd_step", hg.fd_step);
  get(obj, "hvp_step", hg.hvp_step);
  if (hg.neumann_iters < 0) throw ConfigError("'neumann_iters' must be >= 0");
  require_pos(hg.neumann_lr, "neumann_lr");
  require_pos(hg.clip, "clip");
  require_pos(hg.fd_step, "fd_step");
  require_pos(hg.hvp_step, "hvp_step");
}

}  // namespace

ExperimentConfig parse_config(const std::string& json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("invalid JSON: ") + e.what());
  }
  check_keys(doc, "config",
             {"seed", "data", "model", "pretrain", "fedl2p", "eval", "strategies",
              "cluster_k"});

  ExperimentConfig cfg;
  get(doc, "seed", cfg.seed);
  get(doc, "strategies", cfg.strategies);
  get(doc, "cluster_k", cfg.cluster_k);
  for (const auto& s : cfg.strategies)
    if (!parse_strategy(s)) throw ConfigError("unknown strategy '" + s + "'");

  if (doc.contains("data")) {
    const json& d = doc["data"];
    check_keys(d, "data",
               {"dims", "classes", "samples_per_client", "clients", "domains", "alpha",
                "class_spread", "noise", "domain_rotation", "domain_shift",
                "domain_scale", "pretrain_clients", "pretrain_samples_per_client"});
    get(d, "dims", cfg.data.dims);
    get(d, "classes", cfg.data.classes);
    get(d, "samples_per_client", cfg.data.samples_per_client);
    get(d, "clients", cfg.data.clients);
    get(d, "domains", cfg.data.domains);
    get(d, "alpha", cfg.data.alpha);
    get(d, "class_spread", cfg.data.class_spread);
    get(d, "noise", cfg.data.noise);
    get(d, "domain_rotation", cfg.data.domain_rotation);
    get(d, "domain_shift", cfg.data.domain_shift);
    get(d, "domain_scale", cfg.data.domain_scale);
    get(d, "pretrain_clients", cfg.data.pretrain_clients);
    get(d, "pretrain_samples_per_client", cfg.data.pretrain_samples_per_client);
    if (cfg.data.dims == 0 || cfg.data.classes < 2)
      throw ConfigError("data: need dims >= 1 and classes >= 2");
    if (cfg.data.clients <= 0 || cfg.data.domains <= 0)
      throw ConfigError("data: need clients >= 1 and domains >= 1");
    require_pos(cfg.data.alpha, "alpha");
    require_pos(cfg.data.noise, "noise");
  }

  if (doc.contains("model")) {
    const json& m = doc["model"];
    check_keys(m, "model", {"hidden", "batch_norm"});
    get(m, "hidden", cfg.model.hidden);
    get(m, "batch_norm", cfg.model.batch_norm);
    if (cfg.model.hidden.empty()) throw ConfigError("model: hidden must be non-empty");
  }

  if (doc.contains("pretrain")) {
    const json& p = doc["pretrain"];
    check_keys(p, "pretrain", {"rounds", "lr", "lr_drop_rounds", "batch_size", "fraction"});
    get(p, "rounds", cfg.pretrain.rounds);
    get(p, "lr", cfg.pretrain.lr);
    get(p, "lr_drop_rounds", cfg.pretrain.lr_drop_rounds);
    get(p, "batch_size", cfg.pretrain.batch_size);
    get(p, "fraction", cfg.pretrain.fraction);
    if (cfg.pretrain.rounds < 0) throw ConfigError("pretrain: rounds must be >= 0");
    require_pos(cfg.pretrain.lr, "lr");
    if (cfg.pretrain.batch_size <= 0) throw ConfigError("pretrain: batch_size must be > 0");
  }

  if (doc.contains("fedl2p")) {
    const json& f = doc["fedl2p"];
    check_keys(f, "fedl2p",
               {"fraction", "rounds", "local_epochs", "batch_size", "meta_iters",
                "base_lr", "parallelism", "hypergrad"});
    get(f, "fraction", cfg.fl.fraction);
    get(f, "rounds", cfg.fl.rounds);
    get(f, "local_epochs", cfg.fl.local_epochs);
    get(f, "batch_size", cfg.fl.batch_size);
    get(f, "meta_iters", cfg.fl.meta_iters);
    get(f, "base_lr", cfg.fl.base_lr);
    get(f, "parallelism", cfg.fl.parallelism);
    if (f.contains("hypergrad")) parse_hg(f["hypergrad"], cfg.fl.hg);
    if (!(cfg.fl.fraction > 0.0) || cfg.fl.fraction > 1.0)
      throw ConfigError("fedl2p: fraction must be in (0, 1]");
    if (cfg.fl.rounds < 0) throw ConfigError("fedl2p: rounds must be >= 0");
    if (cfg.fl.batch_size <= 0 || cfg.fl.local_epochs < 0 || cfg.fl.meta_iters < 0)
      throw ConfigError("fedl2p: bad schedule values");
    require_pos(cfg.fl.base_lr, "base_lr");
    if (cfg.fl.parallelism < 1) throw ConfigError("fedl2p: parallelism must be >= 1");
  }

  if (doc.contains("eval")) {
    const json& e = doc["eval"];
    check_keys(e, "eval",
               {"epochs", "batch_size", "repeats", "l2p_budget", "l2p_local_epochs"});
    get(e, "epochs", cfg.eval.epochs);
    get(e, "batch_size", cfg.eval.batch_size);
    get(e, "repeats", cfg.eval.repeats);
    get(e, "l2p_budget", cfg.eval.l2p_budget);
    get(e, "l2p_local_epochs", cfg.eval.l2p_local_epochs);
    if (cfg.eval.repeats < 1) throw ConfigError("eval: repeats must be >= 1");
    if (cfg.eval.epochs < 0 || cfg.eval.batch_size <= 0)
      throw ConfigError("eval: bad schedule values");
    require_nonstrict_pos(cfg.eval.l2p_budget, "l2p_budget");
  }

  if (cfg.cluster_k < 0) throw ConfigError("'cluster_k' must be >= 0");

  // one root seed; every stage draws from its own derived stream
  cfg.data.seed = derive_seed(cfg.seed, "data");
  cfg.pretrain.seed = derive_seed(cfg.seed, "pretrain");
  cfg.fl.seed = derive_seed(cfg.seed, "fedl2p");
  cfg.eval.seed = derive_seed(cfg.seed, "eval");
  cfg.fl.num_clients = cfg.data.clients;
  cfg.eval.base_lr = cfg.fl.base_lr;
  cfg.eval.hg = cfg.fl.hg;
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file " + path);
  std::string text((std::istreambuf_iterator<char>(f)),
                   std::istreambuf_iterator<char>());
  return parse_config(text);
}

std::string config_to_json(const ExperimentConfig& cfg) {
  json doc{
      {"seed", cfg.seed},
      {"strategies", cfg.strategies},
      {"cluster_k", cfg.cluster_k},
      {"data",
       {{"dims", cfg.data.dims},
        {"classes", cfg.data.classes},
        {"samples_per_client", cfg.data.samples_per_client},
        {"clients", cfg.data.clients},
        {"domains", cfg.data.domains},
        {"alpha", cfg.data.alpha},
        {"class_spread", cfg.data.class_spread},
        {"noise", cfg.data.noise},
        {"domain_rotation", cfg.data.domain_rotation},
        {"domain_shift", cfg.data.domain_shift},
        {"domain_scale", cfg.data.domain_scale},
        {"pretrain_clients", cfg.data.pretrain_clients},
        {"pretrain_samples_per_client", cfg.data.pretrain_samples_per_client}}},
      {"model", {{"hidden", cfg.model.hidden}, {"batch_norm", cfg.model.batch_norm}}},
      {"pretrain",
       {{"rounds", cfg.pretrain.rounds},
        {"lr", cfg.pretrain.lr},
        {"lr_drop_rounds", cfg.pretrain.lr_drop_rounds},
        {"batch_size", cfg.pretrain.batch_size},
        {"fraction", cfg.pretrain.fraction}}},
      {"fedl2p",
       {{"fraction", cfg.fl.fraction},
        {"rounds", cfg.fl.rounds},
        {"local_epochs", cfg.fl.local_epochs},
        {"batch_size", cfg.fl.batch_size},
        {"meta_iters", cfg.fl.meta_iters},
        {"base_lr", cfg.fl.base_lr},
        {"parallelism", cfg.fl.parallelism},
        {"hypergrad",
         {{"neumann_iters", cfg.fl.hg.neumann_iters},
          {"neumann_lr", cfg.fl.hg.neumann_lr},
          {"clip", cfg.fl.hg.clip},
          {"zeta_bn", cfg.fl.hg.zeta_bn},
          {"zeta_lr", cfg.fl.hg.zeta_lr},
          {"zeta_eta_tilde", cfg.fl.hg.zeta_eta_tilde},
          {"fd_step", cfg.fl.hg.fd_step},
          {"hvp_step", cfg.fl.hg.hvp_step}}}}},
      {"eval",
       {{"epochs", cfg.eval.epochs},
        {"batch_size", cfg.eval.batch_size},
        {"repeats", cfg.eval.repeats},
        {"l2p_budget", cfg.eval.l2p_budget},
        {"l2p_local_epochs", cfg.eval.l2p_local_epochs}}}};
  return doc.dump(2);
}

void save_config(const ExperimentConfig& cfg, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot open " + path + " for writing");
  f << config_to_json(cfg) << "\n";
}

}  // namespace fedl2p
