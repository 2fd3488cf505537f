#include "fedl2p/artifacts.hpp"

#include <fstream>

#include <json.hpp>

namespace fedl2p {

using nlohmann::json;

void save_model(const ModelState& m, const std::string& path) {
  json layers = json::array();
  for (const auto& layer : m.layers) {
    if (const auto* d = std::get_if<DenseLayer>(&layer)) {
      layers.push_back({{"type", "dense"},
                        {"in", d->in},
                        {"out", d->out},
                        {"w", d->w},
                        {"b", d->b}});
    } else if (const auto* bn = std::get_if<BatchNormLayer>(&layer)) {
      layers.push_back({{"type", "batch_norm"},
                        {"channels", bn->channels},
                        {"gamma", bn->gamma},
                        {"delta", bn->delta},
                        {"mu_pt", bn->mu_pt},
                        {"var_pt", bn->var_pt},
                        {"mu_client", bn->mu_client},
                        {"var_client", bn->var_client},
                        {"eps", bn->eps}});
    } else {
      layers.push_back({{"type", "relu"}});
    }
  }
  json doc{{"format", "fedl2p-model-v1"}, {"layers", layers}};
  std::ofstream f(path);
  if (!f) throw std::runtime_error("save_model: cannot open " + path);
  f << doc.dump() << "\n";
}

ModelState load_model(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw MissingArtifact("model checkpoint not found: " + path);
  json doc;
  try {
    doc = json::parse(f);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
  if (doc.value("format", "") != "fedl2p-model-v1")
    throw std::runtime_error(path + ": unsupported model format");
  ModelState m;
  for (const auto& l : doc.at("layers")) {
    std::string type = l.at("type").get<std::string>();
    if (type == "dense") {
      DenseLayer d;
      d.in = l.at("in").get<std::size_t>();
      d.out = l.at("out").get<std::size_t>();
      d.w = l.at("w").get<std::vector<double>>();
      d.b = l.at("b").get<std::vector<double>>();
      if (d.w.size() != d.in * d.out || d.b.size() != d.out)
        throw std::runtime_error(path + ": dense layer shape mismatch");
      m.layers.emplace_back(std::move(d));
    } else if (type == "batch_norm") {
      BatchNormLayer bn;
      bn.channels = l.at("channels").get<std::size_t>();
      bn.gamma = l.at("gamma").get<std::vector<double>>();
      bn.delta = l.at("delta").get<std::vector<double>>();
      bn.mu_pt = l.at("mu_pt").get<std::vector<double>>();
      bn.var_pt = l.at("var_pt").get<std::vector<double>>();
      bn.mu_client = l.at("mu_client").get<std::vector<double>>();
      bn.var_client = l.at("var_client").get<std::vector<double>>();
      bn.eps = l.at("eps").get<double>();
      for (const auto* v : {&bn.gamma, &bn.delta, &bn.mu_pt, &bn.var_pt,
                            &bn.mu_client, &bn.var_client})
        if (v->size() != bn.channels)
          throw std::runtime_error(path + ": batch_norm layer shape mismatch");
      m.layers.emplace_back(std::move(bn));
    } else if (type == "relu") {
      m.layers.emplace_back(ReluLayer{});
    } else {
      throw std::runtime_error(path + ": unknown layer type '" + type + "'");
    }
  }
  return m;
}

void Manifest::set(const std::string& stage, const std::string& rel_path) {
  entries[stage] = rel_path;
}

bool Manifest::has(const std::string& stage) const { return entries.count(stage) > 0; }

std::string Manifest::require(const std::string& stage, const std::string& dir) const {
  auto it = entries.find(stage);
  if (it == entries.end())
    throw MissingArtifact("manifest has no '" + stage + "' artifact; run that stage first");
  std::string path = dir.empty() ? it->second : dir + "/" + it->second;
  std::ifstream probe(path);
  if (!probe) throw MissingArtifact("artifact listed in manifest is missing: " + path);
  return path;
}

void save_manifest(const Manifest& m, const std::string& path) {
  json doc = json::object();
  for (const auto& [k, v] : m.entries) doc[k] = v;
  std::ofstream f(path);
  if (!f) throw std::runtime_error("save_manifest: cannot open " + path);
  f << doc.dump(2) << "\n";
}

Manifest load_manifest(const std::string& path) {
  Manifest m;
  std::ifstream f(path);
  if (!f) return m;
  json doc;
  try {
    doc = json::parse(f);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
  for (auto it = doc.begin(); it != doc.end(); ++it)
    m.entries[it.key()] = it.value().get<std::string>();
  return m;
}

}  // namespace fedl2p
