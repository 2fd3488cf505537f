#pragma once

#include <cstdint>
#include <functional>
#include <utility>
#include <variant>
#include <vector>

#include "fedl2p/tensor.hpp"

namespace fedl2p {

// How a BN layer picks its normalization statistics during a forward pass.
//   Client:   client-estimated running stats (beta = 1)
//   Global:   pretrained running stats (beta = 0)
//   Incoming: statistics of the incoming batch, at train and eval time alike
//   Mixed:    convex mix of pretrained and client stats, one beta per BN layer
enum class BNModeKind { Client, Global, Incoming, Mixed };

struct BNMode {
  BNModeKind kind = BNModeKind::Global;
  std::vector<double> beta;  // used only when kind == Mixed, length B

  static BNMode client() { return {BNModeKind::Client, {}}; }
  static BNMode global() { return {BNModeKind::Global, {}}; }
  static BNMode incoming() { return {BNModeKind::Incoming, {}}; }
  static BNMode mixed(std::vector<double> b) {
    return {BNModeKind::Mixed, std::move(b)};
  }
};

struct DenseLayer {
  std::size_t in = 0, out = 0;
  std::vector<double> w;  // out x in, row-major
  std::vector<double> b;  // out
};

struct BatchNormLayer {
  std::size_t channels = 0;
  std::vector<double> gamma, delta;
  std::vector<double> mu_pt, var_pt;          // pretrained running stats
  std::vector<double> mu_client, var_client;  // client-estimated stats
  double eps = 1e-5;
};

struct ReluLayer {};

using Layer = std::variant<DenseLayer, BatchNormLayer, ReluLayer>;

struct ModelState {
  std::vector<Layer> layers;

  std::size_t input_dim() const;
  std::size_t output_dim() const;
  std::size_t bn_count() const;          // B
  std::size_t param_layer_count() const; // M: layers carrying parameters
};

// MLP classifier: Dense -> [BN] -> ReLU per hidden width, then a Dense head.
ModelState make_mlp(std::size_t input_dim, const std::vector<std::size_t>& hidden,
                    std::size_t num_classes, bool batch_norm, std::uint64_t seed);

// Convex mix of pretrained and client running statistics for one channel.
std::pair<double, double> mix_bn_stats(std::pair<double, double> pt,
                                       std::pair<double, double> client,
                                       double beta);

// -------- parameter flattening --------
// Parameters are grouped two per parameterized layer: the weight-like group
// (dense W, BN gamma) and the bias-like group (dense b, BN delta), giving 2M
// groups. Learning rates are per group.
struct GroupMap {
  struct Group {
    std::size_t offset = 0;
    std::size_t size = 0;
  };
  std::vector<Group> groups;
  std::size_t total = 0;
};

GroupMap group_map(const ModelState& m);

struct ParamVector {
  std::vector<double> data;

  std::size_t size() const { return data.size(); }
  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }
};

ParamVector flatten(const ModelState& m);
void unflatten(const ParamVector& v, ModelState& m);
ModelState with_params(const ModelState& m, const ParamVector& v);

// -------- forward / loss / gradient --------
struct BNBatchCache {
  std::vector<double> mu, var, inv_std;
  bool batch_stats = false;  // stats were computed from the incoming batch
};

struct ForwardCache {
  std::vector<Tensor> inputs;     // input fed to layer k
  std::vector<BNBatchCache> bn;   // aligned with layers; empty for non-BN
  Tensor output;
};

Tensor forward(const ModelState& m, const Tensor& batch, const BNMode& mode,
               bool training = false, ForwardCache* cache = nullptr);

double cross_entropy(const Tensor& logits, const std::vector<int>& labels);
double accuracy(const Tensor& logits, const std::vector<int>& labels);

struct LossGrad {
  double loss = 0;
  ParamVector grad;
};

// Analytic reverse-mode gradient of cross_entropy(forward(...)) w.r.t. every
// learnable group. Running statistics are constants; only Incoming mode
// differentiates through the batch statistics.
LossGrad grad(const ModelState& m, const Tensor& batch,
              const std::vector<int>& labels, const BNMode& mode);

// theta' = theta - eta_k * g on each group k. eta may be negative.
ParamVector sgd_step(const ParamVector& theta, const ParamVector& g,
                     const GroupMap& map, const std::vector<double>& eta);

// -------- fine-tuning --------
struct FinetuneOptions {
  std::size_t epochs = 15;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
};

struct FinetuneResult {
  ModelState model;                     // theta*
  ParamVector pre_step;                 // parameters before the final step
  std::vector<std::size_t> last_batch;  // indices of the final mini-batch
  bool diverged = false;
  double final_loss = 0;
};

FinetuneResult finetune(const ModelState& theta_g, const DataSet& train,
                        const BNMode& mode, const std::vector<double>& eta,
                        const FinetuneOptions& opt);

// One exact full-dataset pass under pretrained statistics; installs the
// per-channel mean/variance of every BN layer's input as client stats.
void update_running_stats(ModelState& m, const DataSet& data);

// Same pass but writing the pretrained statistics (used after pretraining).
// The pass runs in Incoming mode so that later Global-mode forwards on the
// same pool reproduce the batch-statistics behaviour seen in training.
void set_pretrained_stats(ModelState& m, const DataSet& data);

// -------- Hessian-vector products --------
using GradFn = std::function<ParamVector(const ParamVector&)>;

// Central finite difference (grad(theta + s v^) - grad(theta - s v^)) |v|/2s
// with s = step * (1 + |theta|_inf). Returns zero for v = 0.
ParamVector hvp(const ParamVector& theta, const ParamVector& v,
                const GradFn& grad_at, double step);

double norm_inf(const std::vector<double>& v);
double norm2(const std::vector<double>& v);

}  // namespace fedl2p
