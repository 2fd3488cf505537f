// Experiment runner: generate -> pretrain -> meta-train -> personalize -> analyze.
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

#include <CLI11.hpp>
#include <json.hpp>

#include "fedl2p/artifacts.hpp"
#include "fedl2p/config.hpp"
#include "fedl2p/data_gen.hpp"
#include "fedl2p/eval.hpp"
#include "fedl2p/federation.hpp"

namespace fs = std::filesystem;
using namespace fedl2p;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitMissing = 2;
constexpr int kExitDiverged = 3;

struct RunArgs {
  std::string config_path;
  std::string stage = "all";
  std::string out = "out";
  int jobs = 0;
  std::int64_t seed = -1;
};

std::vector<DataSet> chunk_pool(const DataSet& pool, std::size_t n_chunks) {
  std::vector<DataSet> out;
  std::size_t n = pool.size();
  std::size_t per = n / n_chunks;
  for (std::size_t c = 0; c < n_chunks; ++c) {
    std::vector<std::size_t> idx;
    std::size_t hi = (c + 1 == n_chunks) ? n : (c + 1) * per;
    for (std::size_t i = c * per; i < hi; ++i) idx.push_back(i);
    out.push_back(subset(pool, idx));
  }
  return out;
}

ExperimentConfig load_run_config(const RunArgs& args) {
  std::ifstream f(args.config_path);
  if (!f) throw ConfigError("cannot open config file " + args.config_path);
  std::string text((std::istreambuf_iterator<char>(f)),
                   std::istreambuf_iterator<char>());
  if (args.seed >= 0) {
    // override the root seed, then reuse the strict parser
    json doc;
    try {
      doc = json::parse(text);
    } catch (const json::parse_error& e) {
      throw ConfigError(std::string("invalid JSON: ") + e.what());
    }
    doc["seed"] = std::uint64_t(args.seed);
    text = doc.dump();
  }
  return parse_config(text);
}

GeneratedData stage_generate(const ExperimentConfig& cfg, const fs::path& out,
                             Manifest& manifest) {
  GeneratedData data = generate(cfg.data);
  export_clients_csv((out / "dataset.csv").string(), data);
  manifest.set("dataset", "dataset.csv");
  save_manifest(manifest, (out / "manifest.json").string());
  std::cerr << "[generate] " << data.clients.size() << " clients, pretrain pool "
            << data.pretrain_pool.size() << " samples\n";
  return data;
}

GeneratedData need_dataset(const Manifest& manifest, const fs::path& out) {
  return import_clients_csv(manifest.require("dataset", out.string()));
}

ModelState stage_pretrain(const ExperimentConfig& cfg, const GeneratedData& data,
                          const fs::path& out, Manifest& manifest) {
  ModelState init = make_mlp(cfg.data.dims, cfg.model.hidden, cfg.data.classes,
                             cfg.model.batch_norm, derive_seed(cfg.seed, "model_init"));
  std::vector<DataSet> shards = chunk_pool(data.pretrain_pool, cfg.data.pretrain_clients);
  ModelState theta_g = pretrain_fedavg(init, shards, cfg.pretrain);
  set_pretrained_stats(theta_g, data.pretrain_pool);
  save_model(theta_g, (out / "theta_g.json").string());
  manifest.set("theta_g", "theta_g.json");
  save_manifest(manifest, (out / "manifest.json").string());

  Tensor logits = forward(theta_g, data.pretrain_pool.x, BNMode::global());
  std::cerr << "[pretrain] train acc " << accuracy(logits, data.pretrain_pool.y) << "\n";
  return theta_g;
}

void write_cluster_analysis(const ClusterAnalysis& ca, const fs::path& out,
                            Manifest& manifest) {
  json doc{{"domain_labels", ca.domain_labels}, {"quantities", json::array()}};
  for (const auto& q : ca.quantities) {
    doc["quantities"].push_back({{"name", q.name},
                                 {"ari", q.ari},
                                 {"fallback", q.fallback},
                                 {"labels", q.labels},
                                 {"distance_map", q.distance_map}});
    std::string csv_name = "distance_map_" + q.name + ".csv";
    std::ofstream f(out / csv_name);
    f.precision(17);
    for (const auto& row : q.distance_map) {
      for (std::size_t j = 0; j < row.size(); ++j)
        f << (j ? "," : "") << row[j];
      f << "\n";
    }
    manifest.set("distance_map_" + q.name, csv_name);
  }
  std::ofstream f(out / "cluster_analysis.json");
  f << doc.dump(2) << "\n";
  manifest.set("cluster_analysis", "cluster_analysis.json");
}

int cmd_run(const RunArgs& args) {
  ExperimentConfig cfg = load_run_config(args);
  if (args.jobs > 0) cfg.fl.parallelism = args.jobs;

  fs::path out(args.out);
  fs::create_directories(out);
  Manifest manifest = load_manifest((out / "manifest.json").string());
  save_config(cfg, (out / "config.json").string());
  manifest.set("config", "config.json");

  std::set<std::string> stages;
  const std::vector<std::string> pipeline{"generate", "pretrain", "meta-train",
                                          "personalize", "analyze"};
  if (args.stage == "all")
    stages.insert(pipeline.begin(), pipeline.end());
  else if (std::find(pipeline.begin(), pipeline.end(), args.stage) != pipeline.end())
    stages.insert(args.stage);
  else
    throw ConfigError("unknown stage '" + args.stage + "'");

  std::optional<GeneratedData> data;
  std::optional<ModelState> theta_g;
  std::optional<MetaParams> lambda;
  auto dataset = [&]() -> GeneratedData& {
    if (!data) data = need_dataset(manifest, out);
    return *data;
  };
  auto model = [&]() -> ModelState& {
    if (!theta_g) theta_g = load_model(manifest.require("theta_g", out.string()));
    return *theta_g;
  };
  auto meta = [&]() -> MetaParams& {
    if (!lambda) lambda = load_meta(manifest.require("lambda", out.string()));
    return *lambda;
  };

  if (stages.count("generate")) data = stage_generate(cfg, out, manifest);
  if (stages.count("pretrain")) theta_g = stage_pretrain(cfg, dataset(), out, manifest);

  if (stages.count("meta-train")) {
    FedL2PResult res = run_fedl2p(model(), dataset().clients, cfg.fl);
    if (res.best_round < 0)
      throw NumericalError("meta-train: every round diverged; no usable lambda");
    save_meta(res.best_lambda, (out / "lambda.json").string());
    manifest.set("lambda", "lambda.json");
    write_round_records_csv((out / "rounds.csv").string(), res.records);
    manifest.set("rounds", "rounds.csv");

    std::vector<ProfileRow> rows;
    for (const auto& c : dataset().clients) {
      ClientContext ctx = make_client_context(model(), c);
      rows.push_back({c.id, ctx.profile});
    }
    export_profiles_csv((out / "profiles.csv").string(), rows);
    manifest.set("profiles", "profiles.csv");
    save_manifest(manifest, (out / "manifest.json").string());
    lambda = res.best_lambda;
    std::cerr << "[meta-train] best round " << res.best_round << " val loss "
              << res.best_val_loss << "\n";
  }

  if (stages.count("personalize")) {
    EvalOptions opt = cfg.eval;
    opt.epochs = cfg.fl.local_epochs;
    opt.batch_size = cfg.fl.batch_size;
    if (opt.l2p_budget == 0) opt.l2p_budget = cfg.fl.rounds;
    for (const auto& name : cfg.strategies) {
      Strategy s = *parse_strategy(name);
      const MetaParams* lam =
          (s == Strategy::FedL2P || s == Strategy::L2P) ? &meta() : nullptr;
      EvalReport rep = personalize_eval(model(), dataset().clients, s, lam, opt);
      std::string stem = "eval_" + name;
      save_eval_report_json(rep, (out / (stem + ".json")).string());
      save_eval_report_csv(rep, (out / (stem + ".csv")).string());
      manifest.set(stem, stem + ".json");
      std::cerr << "[personalize] " << name << " acc " << rep.mean_acc << " +- "
                << rep.sd_acc << "\n";
    }
    save_manifest(manifest, (out / "manifest.json").string());
  }

  if (stages.count("analyze")) {
    int k = cfg.cluster_k > 0 ? cfg.cluster_k : cfg.data.domains;
    ClusterAnalysis ca = analyze_clusters(model(), dataset().clients, meta(), k,
                                          derive_seed(cfg.seed, "cluster"));
    write_cluster_analysis(ca, out, manifest);
    save_manifest(manifest, (out / "manifest.json").string());
    for (const auto& q : ca.quantities)
      std::cerr << "[analyze] " << q.name << " ARI " << q.ari
                << (q.fallback ? " (kmeans fallback)" : "") << "\n";
  }

  save_manifest(manifest, (out / "manifest.json").string());
  return kExitOk;
}

int cmd_compare(const std::vector<std::string>& paths, const std::string& out_csv) {
  std::vector<EvalReport> reports;
  for (const auto& p : paths) {
    std::ifstream probe(p);
    if (!probe) throw MissingArtifact("report not found: " + p);
    reports.push_back(load_eval_report_json(p));
  }
  // overlap check across client id sets
  std::set<int> common;
  for (const auto& c : reports[0].clients) common.insert(c.id);
  for (std::size_t i = 1; i < reports.size(); ++i) {
    std::set<int> ids, next;
    for (const auto& c : reports[i].clients) ids.insert(c.id);
    std::set_intersection(common.begin(), common.end(), ids.begin(), ids.end(),
                          std::inserter(next, next.begin()));
    common = std::move(next);
  }
  if (common.empty()) throw ConfigError("compare: reports have disjoint client sets");

  std::ostringstream csv;
  csv.precision(17);
  csv << "strategy,mean_acc,sd_acc,delta_vs_first\n";
  std::printf("%-12s %10s %10s %12s\n", "strategy", "mean_acc", "sd_acc", "delta");
  for (const auto& r : reports) {
    double delta = r.mean_acc - reports[0].mean_acc;
    csv << r.strategy << "," << r.mean_acc << "," << r.sd_acc << "," << delta << "\n";
    std::printf("%-12s %10.4f %10.4f %+12.4f\n", r.strategy.c_str(), r.mean_acc,
                r.sd_acc, delta);
  }
  if (!out_csv.empty()) {
    std::ofstream f(out_csv);
    if (!f) throw std::runtime_error("cannot open " + out_csv);
    f << csv.str();
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated meta-learning simulator"};
  app.require_subcommand(1);

  RunArgs run_args;
  auto* run = app.add_subcommand("run", "Run pipeline stages from a JSON config");
  run->add_option("config", run_args.config_path, "Config file path")->required();
  run->add_option("--stage", run_args.stage,
                  "all | generate | pretrain | meta-train | personalize | analyze");
  run->add_option("--out", run_args.out, "Output directory");
  run->add_option("--jobs", run_args.jobs, "Client-level parallelism");
  run->add_option("--seed", run_args.seed, "Root seed override");

  std::vector<std::string> report_paths;
  std::string compare_out;
  auto* cmp = app.add_subcommand("compare", "Tabulate strategy reports side by side");
  cmp->add_option("reports", report_paths, "eval_*.json paths")->expected(2, -1);
  cmp->add_option("--out", compare_out, "Also write the table as CSV");

  try {
    app.parse(argc, argv);
    if (run->parsed()) return cmd_run(run_args);
    return cmd_compare(report_paths, compare_out);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const MissingArtifact& e) {
    std::cerr << "missing artifact: " << e.what() << "\n";
    return kExitMissing;
  } catch (const NumericalError& e) {
    std::cerr << "numerical divergence: " << e.what() << "\n";
    return kExitDiverged;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
}
