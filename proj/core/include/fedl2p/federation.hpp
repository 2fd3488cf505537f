#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fedl2p/data_gen.hpp"
#include "fedl2p/hypergrad.hpp"
#include "fedl2p/meta_nets.hpp"
#include "fedl2p/model.hpp"
#include "fedl2p/profile.hpp"

namespace fedl2p {

struct FLConfig {
  int num_clients = 0;
  double fraction = 0.1;   // r
  int rounds = 500;        // T
  int local_epochs = 15;   // e
  int batch_size = 32;
  int meta_iters = 1;      // K
  double base_lr = 1e-3;   // eta_tilde init and baseline fine-tune rate
  std::uint64_t seed = 0;
  int parallelism = 1;
  HypergradConfig hg;
};

struct RoundClient {
  int id = 0;
  double val_loss = 0;
  int n_samples = 0;
  bool diverged = false;
};

struct RoundRecord {
  int round = 0;
  std::vector<RoundClient> clients;
  double mean_val_loss = 0;  // over non-diverged participants; NaN if none
  std::uint64_t lambda_checksum = 0;
};

// N_i-weighted mean; items reduced in the order given (callers pass ascending
// client id for determinism). Throws on an empty list.
std::vector<double> fedavg_aggregate(
    const std::vector<std::pair<std::vector<double>, double>>& items);

// Uniform sample without replacement of ceil(C*r) ids, deterministic per
// (seed, round).
std::vector<int> sample_clients(int total, double fraction, std::uint64_t seed,
                                int round);

std::uint64_t checksum(const std::vector<double>& v);

// Per-client state cached across rounds: theta_g with this client's BN stats
// installed, plus the meta-net inputs.
struct ClientContext {
  ModelState model;  // theta_g parameters + client running stats
  ClientProfile profile;
};

ClientContext make_client_context(const ModelState& theta_g, const ClientData& client);

struct FedL2PResult {
  MetaParams best_lambda;
  double best_val_loss = 0;
  int best_round = -1;
  MetaParams final_lambda;
  std::vector<RoundRecord> records;
};

FedL2PResult run_fedl2p(const ModelState& theta_g, const std::vector<ClientData>& clients,
                        const FLConfig& cfg);

// One client's contribution to a round: K iterations of
// finetune -> hypergradient -> meta_update starting from the broadcast lambda.
struct ClientRoundResult {
  MetaParams lambda;
  double val_loss = 0;
  bool diverged = false;
};

ClientRoundResult client_meta_round(const MetaParams& lambda_in,
                                    const ClientContext& ctx, const ClientData& client,
                                    const FLConfig& cfg, int round);

// Plain FedAvg pretraining of the full model: single-epoch local updates,
// sample-count-weighted aggregation.
struct PretrainConfig {
  int rounds = 50;
  double lr = 0.1;
  std::vector<int> lr_drop_rounds;  // lr *= 0.1 at these rounds
  int batch_size = 32;
  double fraction = 1.0;
  std::uint64_t seed = 0;
};

ModelState pretrain_fedavg(const ModelState& init,
                           const std::vector<DataSet>& client_train,
                           const PretrainConfig& cfg);

void write_round_records_csv(const std::string& path,
                             const std::vector<RoundRecord>& records);

}  // namespace fedl2p
