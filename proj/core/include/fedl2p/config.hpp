#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedl2p/data_gen.hpp"
#include "fedl2p/eval.hpp"
#include "fedl2p/federation.hpp"

namespace fedl2p {

// Thrown for malformed configs: unknown keys, wrong types, out-of-range values.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  std::vector<std::size_t> hidden{32, 32};
  bool batch_norm = true;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  DataGenSpec data;
  ModelConfig model;
  PretrainConfig pretrain;
  FLConfig fl;                       // meta-training schedule
  EvalOptions eval;
  std::vector<std::string> strategies{"ft-bn-c", "ft-bn-g", "ft-bn-i", "fedl2p"};
  int cluster_k = 0;                 // 0 -> use the domain count
};

// Strict parse: any key not recognized is an error.
ExperimentConfig load_config(const std::string& path);
ExperimentConfig parse_config(const std::string& json_text);
void save_config(const ExperimentConfig& cfg, const std::string& path);
std::string config_to_json(const ExperimentConfig& cfg);

}  // namespace fedl2p
