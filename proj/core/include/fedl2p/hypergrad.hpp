#pragma once

#include <functional>
#include <vector>

#include "fedl2p/meta_nets.hpp"
#include "fedl2p/model.hpp"
#include "fedl2p/profile.hpp"

namespace fedl2p {

struct HypergradConfig {
  int neumann_iters = 3;       // Q
  double neumann_lr = 0.1;     // psi
  double clip = 1.0;           // final hypergradient clipped to [-clip, clip]
  double zeta_bn = 1e-3;
  double zeta_lr = 1e-3;
  double zeta_eta_tilde = 1e-4;
  double fd_step = 1e-3;       // relative FD step over (beta, eta) sites
  double hvp_step = 1e-5;      // FD step for Hessian-vector products
};

using HvpFn = std::function<ParamVector(const ParamVector&)>;

// p = psi * sum_{i=0}^{Q} v (I - psi H)^i, which tends to v H^-1 as Q grows.
// The accumulation is the printed Neumann recursion rescaled by psi.
ParamVector neumann_inverse_hvp(const ParamVector& v, const HvpFn& hvp_fn,
                                double psi, int iters);

// ---- generic finite-difference scaffolding over hyperparameter sites ----
// (also used directly by the analytic bilevel oracles in the test suite)

using HyperLossFn =
    std::function<double(const std::vector<double>& hyper, const std::vector<double>& theta)>;
using HyperFn = std::function<double(const std::vector<double>& hyper)>;

// d/d hyper_j of <p, grad_theta L(hyper, theta)> at theta, via central FD over
// each hyper coordinate of the directional derivative of L along p.
std::vector<double> fd_mixed_partial(const HyperLossFn& loss,
                                     const std::vector<double>& theta,
                                     const std::vector<double>& p,
                                     const std::vector<double>& hyper,
                                     const std::vector<double>& lo,
                                     const std::vector<double>& hi,
                                     double rel_step, double dir_step = 1e-5);

// Central FD gradient over bounded coordinates, one-sided at the bounds.
std::vector<double> fd_grad_bounded(const HyperFn& f, const std::vector<double>& hyper,
                                    const std::vector<double>& lo,
                                    const std::vector<double>& hi, double rel_step);

// ---- network path ----

struct MetaGrad {
  Mlp3Grad bn_net;
  Mlp3Grad lr_net;
  std::vector<double> eta_tilde;
};

struct ClientHypergrad {
  MetaGrad grad;
  double val_loss = 0;
  bool finite = true;
};

// dL_V/dbeta at theta* by central FD over the B beta coordinates.
std::vector<double> direct_val_grad(const ModelState& theta_star,
                                    const std::vector<double>& beta,
                                    const DataSet& val, double fd_step);

// d/d(beta,eta) of <p, grad_theta L_T> where L_T is the one-re-taken-step
// surrogate anchored at the stored pre-step parameters.
std::vector<double> mixed_partial_term(
    const ModelState& arch, const FinetuneResult& ft, const DataSet& train,
    const std::vector<double>& beta, const std::vector<double>& eta,
    const ParamVector& p, double fd_step);

// Assembles Algorithm-2's output, chains it through the meta-nets and clips.
ClientHypergrad client_hypergradient(const MetaParams& lambda,
                                     const ModelState& client_model,
                                     const FinetuneResult& ft,
                                     const ClientProfile& profile,
                                     const DataSet& train, const DataSet& val,
                                     const HypergradConfig& cfg);

// Per-block SGD on lambda with (zeta_bn, zeta_lr, zeta_eta_tilde).
void meta_update(MetaParams& lambda, const MetaGrad& h, const HypergradConfig& cfg);

double clip_value(double x, double c);

}  // namespace fedl2p
