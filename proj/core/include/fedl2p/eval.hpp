#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fedl2p/federation.hpp"

namespace fedl2p {

enum class Strategy { FtBnC, FtBnG, FtBnI, FedL2P, L2P };

std::string to_string(Strategy s);
std::optional<Strategy> parse_strategy(const std::string& s);

struct EvalOptions {
  int epochs = 15;
  int batch_size = 32;
  int repeats = 3;
  double base_lr = 1e-3;
  std::uint64_t seed = 0;
  int l2p_budget = 0;  // meta iterations for L2P; 0 means "match FedL2P"
  HypergradConfig hg;
  int l2p_local_epochs = 15;
};

struct ClientEval {
  int id = 0;
  int domain = 0;
  std::vector<double> acc = {};  // one per repeat
  double mean_acc = 0;
  double val_loss = 0;           // under the personalized model, repeat 0
  double sparsity = 0;           // fraction of parameters with eta ~ 0
  bool diverged = false;
};

struct EvalReport {
  std::string strategy;
  std::vector<ClientEval> clients;
  double mean_acc = 0;  // mean over repeats of the per-repeat client mean
  double sd_acc = 0;    // SD over repeats
};

// Fine-tunes theta_g per client under the strategy's (BN mode, eta) and
// reports test accuracy. FedL2P derives (beta, eta) from the client profile
// via lambda; fixed baselines use base_lr for every group.
EvalReport personalize_eval(const ModelState& theta_g,
                            const std::vector<ClientData>& clients, Strategy strategy,
                            const MetaParams* lambda, const EvalOptions& opt);

// Runs the meta-learning loop on a single client (no aggregation).
MetaParams l2p_local(const ModelState& theta_g, const ClientData& client,
                     int budget, const FLConfig& cfg);

// Fraction of parameters lying in groups whose |eta_k| <= tol.
double sparsity(const std::vector<double>& eta,
                const std::vector<std::size_t>& group_sizes, double tol);

// Adjusted Rand index; the degenerate single-cluster-both case is 1.
double ari(const std::vector<int>& a, const std::vector<int>& b);

std::vector<std::vector<double>> pairwise_distances(
    const std::vector<std::vector<double>>& vectors);

// Block (j,k) = log(d(j,k) / sqrt(d(j,j) d(k,k))) of mean pairwise Euclidean
// distances between domains; diagonal 0; values capped at +-cap.
std::vector<std::vector<double>> cluster_distance_map(
    const std::vector<std::vector<double>>& vectors, const std::vector<int>& domains,
    double cap = 30.0, double floor = 1e-12);

// Spectral clustering: Gaussian affinity with median-heuristic bandwidth,
// normalized-Laplacian embedding, k-means labels. Falls back to k-means on
// the raw vectors when the affinity graph is disconnected.
struct SpectralResult {
  std::vector<int> labels;
  bool fallback = false;
};
SpectralResult spectral_cluster(const std::vector<std::vector<double>>& vectors,
                                int k, std::uint64_t seed);

// Full cluster analysis of meta-net inputs (xi, x) and outputs (beta, eta).
struct ClusterQuantity {
  std::string name;
  std::vector<std::vector<double>> vectors;  // one per client
  std::vector<int> labels;
  double ari = 0;
  bool fallback = false;
  std::vector<std::vector<double>> distance_map;
};

struct ClusterAnalysis {
  std::vector<int> domain_labels;
  std::vector<ClusterQuantity> quantities;  // xi, x, beta, eta
};

ClusterAnalysis analyze_clusters(const ModelState& theta_g,
                                 const std::vector<ClientData>& clients,
                                 const MetaParams& lambda, int k, std::uint64_t seed);

void save_eval_report_json(const EvalReport& r, const std::string& path);
EvalReport load_eval_report_json(const std::string& path);
void save_eval_report_csv(const EvalReport& r, const std::string& path);

}  // namespace fedl2p
