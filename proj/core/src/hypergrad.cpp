#include "fedl2p/hypergrad.hpp"

#include <cmath>
#include <limits>
#include <numeric>

namespace fedl2p {

double clip_value(double x, double c) { return std::clamp(x, -c, c); }

ParamVector neumann_inverse_hvp(const ParamVector& v, const HvpFn& hvp_fn,
                                double psi, int iters) {
  if (psi <= 0) throw NumericalError("neumann_inverse_hvp: psi must be positive");
  if (iters < 0) throw NumericalError("neumann_inverse_hvp: negative iteration count");
  ParamVector p = v;
  ParamVector cur = v;
  for (int i = 0; i < iters; ++i) {
    ParamVector hv = hvp_fn(cur);
    if (hv.size() != cur.size()) throw ShapeError("neumann_inverse_hvp: hvp size mismatch");
    for (std::size_t j = 0; j < cur.size(); ++j) cur.data[j] -= psi * hv.data[j];
    for (std::size_t j = 0; j < cur.size(); ++j) p.data[j] += cur.data[j];
  }
  for (auto& x : p.data) x *= psi;
  require_finite(p.data, "neumann_inverse_hvp (series diverged?)");
  return p;
}

std::vector<double> fd_grad_bounded(const HyperFn& f, const std::vector<double>& hyper,
                                    const std::vector<double>& lo,
                                    const std::vector<double>& hi, double rel_step) {
  std::vector<double> out(hyper.size(), 0.0);
  for (std::size_t j = 0; j < hyper.size(); ++j) {
    double step = rel_step * (1.0 + std::abs(hyper[j]));
    double xp = std::min(hyper[j] + step, hi[j]);
    double xm = std::max(hyper[j] - step, lo[j]);
    if (xp == xm) continue;
    std::vector<double> hp = hyper, hm = hyper;
    hp[j] = xp;
    hm[j] = xm;
    out[j] = (f(hp) - f(hm)) / (xp - xm);
    if (!std::isfinite(out[j])) throw NumericalError("fd_grad_bounded: non-finite quotient");
  }
  return out;
}

std::vector<double> fd_mixed_partial(const HyperLossFn& loss,
                                     const std::vector<double>& theta,
                                     const std::vector<double>& p,
                                     const std::vector<double>& hyper,
                                     const std::vector<double>& lo,
                                     const std::vector<double>& hi,
                                     double rel_step, double dir_step) {
  double np = norm2(p);
  if (np == 0.0) return std::vector<double>(hyper.size(), 0.0);
  double a = dir_step * (1.0 + norm_inf(theta));
  std::vector<double> tp = theta, tm = theta;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    double d = a * p[i] / np;
    tp[i] += d;
    tm[i] -= d;
  }
  // g(hyper) = <p, grad_theta L> as a directional derivative along p
  auto g = [&](const std::vector<double>& h) {
    return (loss(h, tp) - loss(h, tm)) * np / (2.0 * a);
  };
  return fd_grad_bounded(g, hyper, lo, hi, rel_step);
}

std::vector<double> direct_val_grad(const ModelState& theta_star,
                                    const std::vector<double>& beta,
                                    const DataSet& val, double fd_step) {
  if (val.size() == 0) throw ShapeError("direct_val_grad: empty validation set");
  auto f = [&](const std::vector<double>& b) {
    Tensor logits = forward(theta_star, val.x, BNMode::mixed(b), false);
    return cross_entropy(logits, val.y);
  };
  std::vector<double> lo(beta.size(), 0.0), hi(beta.size(), 1.0);
  return fd_grad_bounded(f, beta, lo, hi, fd_step);
}

std::vector<double> mixed_partial_term(
    const ModelState& arch, const FinetuneResult& ft, const DataSet& train,
    const std::vector<double>& beta, const std::vector<double>& eta,
    const ParamVector& p, double fd_step) {
  GroupMap map = group_map(arch);
  std::size_t b_count = beta.size();

  std::vector<std::size_t> batch_idx = ft.last_batch;
  if (batch_idx.empty()) {
    batch_idx.resize(train.size());
    std::iota(batch_idx.begin(), batch_idx.end(), 0);
  }
  DataSet last_batch = subset(train, batch_idx);

  // L_T(theta, hyper): re-take the final SGD step from the anchor under the
  // perturbed (beta, eta), then evaluate the training loss at theta'.
  HyperLossFn loss = [&](const std::vector<double>& hyper,
                         const std::vector<double>& theta) {
    std::vector<double> b(hyper.begin(), hyper.begin() + b_count);
    std::vector<double> e(hyper.begin() + b_count, hyper.end());
    BNMode mode = BNMode::mixed(b);
    ParamVector th{theta};
    ModelState model = with_params(arch, th);
    LossGrad lg = grad(model, last_batch.x, last_batch.y, mode);
    ParamVector stepped = sgd_step(th, lg.grad, map, e);
    ModelState model2 = with_params(arch, stepped);
    Tensor logits = forward(model2, train.x, mode, false);
    return cross_entropy(logits, train.y);
  };

  std::vector<double> hyper = beta;
  hyper.insert(hyper.end(), eta.begin(), eta.end());
  std::vector<double> lo(hyper.size(), -std::numeric_limits<double>::infinity());
  std::vector<double> hi(hyper.size(), std::numeric_limits<double>::infinity());
  for (std::size_t j = 0; j < b_count; ++j) {
    lo[j] = 0.0;
    hi[j] = 1.0;
  }
  return fd_mixed_partial(loss, ft.pre_step.data, p.data, hyper, lo, hi, fd_step);
}

ClientHypergrad client_hypergradient(const MetaParams& lambda,
                                     const ModelState& client_model,
                                     const FinetuneResult& ft,
                                     const ClientProfile& profile,
                                     const DataSet& train, const DataSet& val,
                                     const HypergradConfig& cfg) {
  ClientHypergrad out;
  try {
    Mlp3Cache bn_cache, lr_cache;
    std::vector<double> beta = bnnet_forward(lambda, profile.xi, &bn_cache);
    LrNetOut lr = lrnet_forward(lambda, profile.feat_stats, &lr_cache);
    BNMode mode = BNMode::mixed(beta);

    // v = dL_V/dtheta at theta*
    LossGrad val_lg = grad(ft.model, val.x, val.y, mode);
    out.val_loss = val_lg.loss;

    // inverse-Hessian-vector product on the training loss at theta*
    ParamVector theta_star = flatten(ft.model);
    GradFn grad_train = [&](const ParamVector& th) {
      ModelState m2 = with_params(ft.model, th);
      return grad(m2, train.x, train.y, mode).grad;
    };
    HvpFn hvp_fn = [&](const ParamVector& w) {
      return hvp(theta_star, w, grad_train, cfg.hvp_step);
    };
    ParamVector p =
        neumann_inverse_hvp(val_lg.grad, hvp_fn, cfg.neumann_lr, cfg.neumann_iters);

    std::vector<double> direct = direct_val_grad(ft.model, beta, val, cfg.fd_step);
    std::vector<double> mixed =
        mixed_partial_term(ft.model, ft, train, beta, lr.eta, p, cfg.fd_step);

    // Algorithm-2 output at the (beta, eta) sites: direct - p d_{lambda theta}L_T
    std::size_t b_count = beta.size();
    std::vector<double> up_beta(b_count), up_eta(lr.eta.size());
    for (std::size_t j = 0; j < b_count; ++j) up_beta[j] = direct[j] - mixed[j];
    for (std::size_t k = 0; k < up_eta.size(); ++k) up_eta[k] = -mixed[b_count + k];

    // chain through the meta-nets (STE at the clamps)
    out.grad.bn_net = mlp3_vjp(lambda.bn_net, bn_cache, profile.xi, up_beta);
    std::vector<double> up_raw(up_eta.size());
    for (std::size_t k = 0; k < up_eta.size(); ++k)
      up_raw[k] = up_eta[k] * lambda.eta_tilde[k];
    out.grad.lr_net = mlp3_vjp(lambda.lr_net, lr_cache, profile.feat_stats, up_raw);
    out.grad.eta_tilde.resize(up_eta.size());
    for (std::size_t k = 0; k < up_eta.size(); ++k)
      out.grad.eta_tilde[k] = up_eta[k] * lr.raw_clamped[k];

    auto clip_all = [&](std::vector<double>& v) {
      for (auto& x : v) {
        if (!std::isfinite(x)) throw NumericalError("non-finite hypergradient");
        x = clip_value(x, cfg.clip);
      }
    };
    for (auto* v : {&out.grad.bn_net.w1, &out.grad.bn_net.b1, &out.grad.bn_net.w2,
                    &out.grad.bn_net.b2, &out.grad.bn_net.w3, &out.grad.bn_net.b3,
                    &out.grad.lr_net.w1, &out.grad.lr_net.b1, &out.grad.lr_net.w2,
                    &out.grad.lr_net.b2, &out.grad.lr_net.w3, &out.grad.lr_net.b3,
                    &out.grad.eta_tilde})
      clip_all(*v);
  } catch (const NumericalError&) {
    out.finite = false;
  }
  return out;
}

void meta_update(MetaParams& lambda, const MetaGrad& h, const HypergradConfig& cfg) {
  auto apply = [](Mlp3& net, const Mlp3Grad& g, double zeta) {
    auto sub = [zeta](std::vector<double>& w, const std::vector<double>& gw) {
      if (w.size() != gw.size()) throw ShapeError("meta_update: shape mismatch");
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= zeta * gw[i];
    };
    sub(net.w1, g.w1);
    sub(net.b1, g.b1);
    sub(net.w2, g.w2);
    sub(net.b2, g.b2);
    sub(net.w3, g.w3);
    sub(net.b3, g.b3);
  };
  apply(lambda.bn_net, h.bn_net, cfg.zeta_bn);
  apply(lambda.lr_net, h.lr_net, cfg.zeta_lr);
  if (lambda.eta_tilde.size() != h.eta_tilde.size())
    throw ShapeError("meta_update: eta_tilde shape mismatch");
  for (std::size_t i = 0; i < lambda.eta_tilde.size(); ++i)
    lambda.eta_tilde[i] -= cfg.zeta_eta_tilde * h.eta_tilde[i];
}

}  // namespace fedl2p
