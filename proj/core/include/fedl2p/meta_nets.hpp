#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedl2p/tensor.hpp"

namespace fedl2p {

// input -> 100 -> 100 -> output, ReLU between layers.
struct Mlp3 {
  std::size_t in = 0, hidden = 0, out = 0;
  std::vector<double> w1, b1;  // hidden x in
  std::vector<double> w2, b2;  // hidden x hidden
  std::vector<double> w3, b3;  // out x hidden
};

// lambda = {w_bn, w_lr, eta_tilde}. BNNet maps the per-BN-layer divergence
// vector xi to beta in [0,1]^B; LRNet maps per-layer feature mean/SD pairs to
// raw rates clamped to [0,1000], scaled elementwise by the learnable
// post-multiplier eta_tilde (which may go negative).
struct MetaParams {
  Mlp3 bn_net;
  Mlp3 lr_net;
  std::vector<double> eta_tilde;  // length 2M
  double bn_clamp_lo = 0.0, bn_clamp_hi = 1.0;
  double lr_clamp_lo = 0.0, lr_clamp_hi = 1000.0;
};

// Xavier-normal weights with gain 0.1; biases 0.5 (BNNet) / 1.0 (LRNet) so
// beta starts near 0.5 and the raw rate near 1.0; eta_tilde starts at the
// base fine-tuning learning rate.
MetaParams init_meta(std::size_t num_param_layers, std::size_t num_bn,
                     double base_lr, std::uint64_t seed,
                     std::size_t hidden = 100);

struct Mlp3Cache {
  std::vector<double> h1, h2;  // post-ReLU hidden activations
  std::vector<double> a1, a2;  // pre-ReLU
  std::vector<double> raw;     // pre-clamp output
};

std::vector<double> mlp3_forward(const Mlp3& net, const std::vector<double>& in,
                                 Mlp3Cache* cache = nullptr);

std::vector<double> bnnet_forward(const MetaParams& mp, const std::vector<double>& xi,
                                  Mlp3Cache* cache = nullptr);

struct LrNetOut {
  std::vector<double> eta;          // clamped raw ⊙ eta_tilde
  std::vector<double> raw_clamped;  // clamp_[0,1000](raw)
};

LrNetOut lrnet_forward(const MetaParams& mp, const std::vector<double>& stats,
                       Mlp3Cache* cache = nullptr);

struct HyperOutputs {
  std::vector<double> beta;      // length B
  std::vector<double> eta;       // length 2M
  std::vector<double> lr_raw;    // clamped LRNet output
};

struct Mlp3Grad {
  std::vector<double> w1, b1, w2, b2, w3, b3;
};

// Gradient of <upstream, output> w.r.t. the net parameters; the output clamp
// is a straight-through estimator, so upstream passes it unchanged.
Mlp3Grad mlp3_vjp(const Mlp3& net, const Mlp3Cache& cache,
                  const std::vector<double>& input,
                  const std::vector<double>& upstream);

// ---- flat layout [w_bn | w_lr | eta_tilde] for aggregation and updates ----
std::vector<double> flatten_mlp3(const Mlp3& net);
void unflatten_mlp3(const std::vector<double>& v, std::size_t& off, Mlp3& net);
std::vector<double> flatten_meta(const MetaParams& mp);
void unflatten_meta(const std::vector<double>& v, MetaParams& mp);
std::size_t mlp3_param_count(const Mlp3& net);

// JSON checkpoint: ordered (name, shape, values), lossless at 64-bit.
void save_meta(const MetaParams& mp, const std::string& path);
MetaParams load_meta(const std::string& path);

}  // namespace fedl2p
