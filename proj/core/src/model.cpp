#include "fedl2p/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fedl2p/rng.hpp"

namespace fedl2p {

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

}  // namespace

std::size_t ModelState::input_dim() const {
  for (const auto& l : layers)
    if (auto* d = std::get_if<DenseLayer>(&l)) return d->in;
  for (const auto& l : layers)
    if (auto* b = std::get_if<BatchNormLayer>(&l)) return b->channels;
  return 0;
}

std::size_t ModelState::output_dim() const {
  for (auto it = layers.rbegin(); it != layers.rend(); ++it) {
    if (auto* d = std::get_if<DenseLayer>(&*it)) return d->out;
    if (auto* b = std::get_if<BatchNormLayer>(&*it)) return b->channels;
  }
  return 0;
}

std::size_t ModelState::bn_count() const {
  std::size_t n = 0;
  for (const auto& l : layers)
    if (std::holds_alternative<BatchNormLayer>(l)) ++n;
  return n;
}

std::size_t ModelState::param_layer_count() const {
  std::size_t n = 0;
  for (const auto& l : layers)
    if (!std::holds_alternative<ReluLayer>(l)) ++n;
  return n;
}

ModelState make_mlp(std::size_t input_dim, const std::vector<std::size_t>& hidden,
                    std::size_t num_classes, bool batch_norm, std::uint64_t seed) {
  Rng rng(seed);
  ModelState m;
  auto dense = [&](std::size_t in, std::size_t out) {
    DenseLayer d;
    d.in = in;
    d.out = out;
    d.w.resize(in * out);
    d.b.assign(out, 0.0);
    // He-normal, suited to the ReLU stacks built here
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / double(in)));
    for (auto& v : d.w) v = dist(rng);
    return d;
  };
  std::size_t prev = input_dim;
  for (std::size_t h : hidden) {
    m.layers.emplace_back(dense(prev, h));
    if (batch_norm) {
      BatchNormLayer bn;
      bn.channels = h;
      bn.gamma.assign(h, 1.0);
      bn.delta.assign(h, 0.0);
      bn.mu_pt.assign(h, 0.0);
      bn.var_pt.assign(h, 1.0);
      bn.mu_client.assign(h, 0.0);
      bn.var_client.assign(h, 1.0);
      m.layers.emplace_back(bn);
    }
    m.layers.emplace_back(ReluLayer{});
    prev = h;
  }
  m.layers.emplace_back(dense(prev, num_classes));
  return m;
}

std::pair<double, double> mix_bn_stats(std::pair<double, double> pt,
                                       std::pair<double, double> client,
                                       double beta) {
  if (beta < 0.0 || beta > 1.0)
    throw NumericalError("mix_bn_stats: beta outside [0,1]");
  double mu = (1.0 - beta) * pt.first + beta * client.first;
  double var = (1.0 - beta) * pt.second + beta * client.second;
  return {mu, var};
}

GroupMap group_map(const ModelState& m) {
  GroupMap g;
  std::size_t off = 0;
  auto push = [&](std::size_t n) {
    g.groups.push_back({off, n});
    off += n;
  };
  for (const auto& l : m.layers) {
    std::visit(overloaded{
                   [&](const DenseLayer& d) {
                     push(d.w.size());
                     push(d.b.size());
                   },
                   [&](const BatchNormLayer& b) {
                     push(b.gamma.size());
                     push(b.delta.size());
                   },
                   [&](const ReluLayer&) {},
               },
               l);
  }
  g.total = off;
  return g;
}

ParamVector flatten(const ModelState& m) {
  ParamVector v;
  v.data.reserve(group_map(m).total);
  for (const auto& l : m.layers) {
    std::visit(overloaded{
                   [&](const DenseLayer& d) {
                     v.data.insert(v.data.end(), d.w.begin(), d.w.end());
                     v.data.insert(v.data.end(), d.b.begin(), d.b.end());
                   },
                   [&](const BatchNormLayer& b) {
                     v.data.insert(v.data.end(), b.gamma.begin(), b.gamma.end());
                     v.data.insert(v.data.end(), b.delta.begin(), b.delta.end());
                   },
                   [&](const ReluLayer&) {},
               },
               l);
  }
  return v;
}

void unflatten(const ParamVector& v, ModelState& m) {
  std::size_t off = 0;
  auto take = [&](std::vector<double>& dst) {
    if (off + dst.size() > v.size())
      throw ShapeError("unflatten: parameter vector too short");
    std::copy(v.data.begin() + off, v.data.begin() + off + dst.size(), dst.begin());
    off += dst.size();
  };
  for (auto& l : m.layers) {
    std::visit(overloaded{
                   [&](DenseLayer& d) {
                     take(d.w);
                     take(d.b);
                   },
                   [&](BatchNormLayer& b) {
                     take(b.gamma);
                     take(b.delta);
                   },
                   [&](ReluLayer&) {},
               },
               l);
  }
  if (off != v.size()) throw ShapeError("unflatten: parameter vector too long");
}

ModelState with_params(const ModelState& m, const ParamVector& v) {
  ModelState out = m;
  unflatten(v, out);
  return out;
}

namespace {

// Effective per-channel statistics of a BN layer under a given mode.
void effective_stats(const BatchNormLayer& bn, const BNMode& mode,
                     std::size_t bn_index, const Tensor& x, BNBatchCache& c) {
  std::size_t ch = bn.channels;
  c.mu.resize(ch);
  c.var.resize(ch);
  c.inv_std.resize(ch);
  c.batch_stats = false;
  switch (mode.kind) {
    case BNModeKind::Global:
      c.mu = bn.mu_pt;
      c.var = bn.var_pt;
      break;
    case BNModeKind::Client:
      c.mu = bn.mu_client;
      c.var = bn.var_client;
      break;
    case BNModeKind::Mixed: {
      if (mode.beta.size() <= bn_index)
        throw ShapeError("forward: beta vector shorter than BN layer count");
      double beta = mode.beta[bn_index];
      for (std::size_t j = 0; j < ch; ++j) {
        auto [mu, var] = mix_bn_stats({bn.mu_pt[j], bn.var_pt[j]},
                                      {bn.mu_client[j], bn.var_client[j]}, beta);
        c.mu[j] = mu;
        c.var[j] = var;
      }
      break;
    }
    case BNModeKind::Incoming: {
      c.batch_stats = true;
      std::size_t n = x.rows;
      if (n == 0) throw ShapeError("forward: empty batch in Incoming mode");
      for (std::size_t j = 0; j < ch; ++j) {
        double s = 0;
        for (std::size_t i = 0; i < n; ++i) s += x.at(i, j);
        double mu = s / double(n);
        double sq = 0;
        for (std::size_t i = 0; i < n; ++i) {
          double d = x.at(i, j) - mu;
          sq += d * d;
        }
        c.mu[j] = mu;
        c.var[j] = sq / double(n);  // biased, standard BN
      }
      break;
    }
  }
  for (std::size_t j = 0; j < ch; ++j)
    c.inv_std[j] = 1.0 / std::sqrt(c.var[j] + bn.eps);
}

}  // namespace

Tensor forward(const ModelState& m, const Tensor& batch, const BNMode& mode,
               bool /*training*/, ForwardCache* cache) {
  if (batch.cols != m.input_dim())
    throw ShapeError("forward: batch feature dim does not match model input dim");
  Tensor cur = batch;
  if (cache) {
    cache->inputs.clear();
    cache->bn.assign(m.layers.size(), {});
  }
  std::size_t bn_index = 0;
  for (std::size_t k = 0; k < m.layers.size(); ++k) {
    if (cache) cache->inputs.push_back(cur);
    const Layer& l = m.layers[k];
    if (auto* d = std::get_if<DenseLayer>(&l)) {
      if (cur.cols != d->in) throw ShapeError("forward: dense layer input mismatch");
      Tensor next(cur.rows, d->out);
      for (std::size_t i = 0; i < cur.rows; ++i) {
        const double* xi = cur.row(i);
        double* yi = next.row(i);
        for (std::size_t o = 0; o < d->out; ++o) {
          const double* wrow = d->w.data() + o * d->in;
          double acc = d->b[o];
          for (std::size_t j = 0; j < d->in; ++j) acc += wrow[j] * xi[j];
          yi[o] = acc;
        }
      }
      cur = std::move(next);
    } else if (auto* bn = std::get_if<BatchNormLayer>(&l)) {
      if (cur.cols != bn->channels) throw ShapeError("forward: BN channel mismatch");
      BNBatchCache local;
      BNBatchCache& c = cache ? cache->bn[k] : local;
      effective_stats(*bn, mode, bn_index, cur, c);
      Tensor next(cur.rows, cur.cols);
      for (std::size_t i = 0; i < cur.rows; ++i)
        for (std::size_t j = 0; j < cur.cols; ++j)
          next.at(i, j) =
              (cur.at(i, j) - c.mu[j]) * c.inv_std[j] * bn->gamma[j] + bn->delta[j];
      cur = std::move(next);
      ++bn_index;
    } else {
      for (auto& v : cur.data) v = v > 0.0 ? v : 0.0;
    }
  }
  require_finite(cur, "forward activations");
  if (cache) cache->output = cur;
  return cur;
}

double cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.rows != labels.size())
    throw ShapeError("cross_entropy: logits rows != label count");
  if (labels.empty()) throw ShapeError("cross_entropy: empty batch");
  double total = 0;
  for (std::size_t i = 0; i < logits.rows; ++i) {
    const double* z = logits.row(i);
    double mx = *std::max_element(z, z + logits.cols);
    double lse = 0;
    for (std::size_t c = 0; c < logits.cols; ++c) lse += std::exp(z[c] - mx);
    lse = mx + std::log(lse);
    total += lse - z[labels[i]];
  }
  return total / double(logits.rows);
}

double accuracy(const Tensor& logits, const std::vector<int>& labels) {
  if (labels.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < logits.rows; ++i) {
    const double* z = logits.row(i);
    std::size_t arg = 0;
    for (std::size_t c = 1; c < logits.cols; ++c)
      if (z[c] > z[arg]) arg = c;
    if (int(arg) == labels[i]) ++hit;
  }
  return double(hit) / double(labels.size());
}

LossGrad grad(const ModelState& m, const Tensor& batch,
              const std::vector<int>& labels, const BNMode& mode) {
  ForwardCache cache;
  Tensor logits = forward(m, batch, mode, true, &cache);
  double loss = cross_entropy(logits, labels);

  std::size_t n = batch.rows;
  // d loss / d logits = (softmax - onehot) / n
  Tensor dcur(logits.rows, logits.cols);
  for (std::size_t i = 0; i < logits.rows; ++i) {
    const double* z = logits.row(i);
    double mx = *std::max_element(z, z + logits.cols);
    double denom = 0;
    for (std::size_t c = 0; c < logits.cols; ++c) denom += std::exp(z[c] - mx);
    for (std::size_t c = 0; c < logits.cols; ++c)
      dcur.at(i, c) = std::exp(z[c] - mx) / denom / double(n);
    dcur.at(i, labels[i]) -= 1.0 / double(n);
  }

  // gradient blocks per layer, assembled in forward order afterwards
  std::vector<std::vector<double>> gw(m.layers.size()), gb(m.layers.size());
  for (std::size_t kk = m.layers.size(); kk-- > 0;) {
    const Layer& l = m.layers[kk];
    const Tensor& x = cache.inputs[kk];
    if (auto* d = std::get_if<DenseLayer>(&l)) {
      gw[kk].assign(d->w.size(), 0.0);
      gb[kk].assign(d->b.size(), 0.0);
      Tensor dx(x.rows, d->in);
      for (std::size_t i = 0; i < x.rows; ++i) {
        const double* xi = x.row(i);
        const double* dyi = dcur.row(i);
        double* dxi = dx.row(i);
        for (std::size_t o = 0; o < d->out; ++o) {
          double dy = dyi[o];
          gb[kk][o] += dy;
          double* gwrow = gw[kk].data() + o * d->in;
          const double* wrow = d->w.data() + o * d->in;
          for (std::size_t j = 0; j < d->in; ++j) {
            gwrow[j] += dy * xi[j];
            dxi[j] += dy * wrow[j];
          }
        }
      }
      dcur = std::move(dx);
    } else if (auto* bn = std::get_if<BatchNormLayer>(&l)) {
      const BNBatchCache& c = cache.bn[kk];
      std::size_t ch = bn->channels;
      gw[kk].assign(ch, 0.0);  // gamma
      gb[kk].assign(ch, 0.0);  // delta
      Tensor dx(x.rows, ch);
      for (std::size_t j = 0; j < ch; ++j) {
        double sum_dy = 0, sum_dy_xhat = 0;
        for (std::size_t i = 0; i < x.rows; ++i) {
          double xhat = (x.at(i, j) - c.mu[j]) * c.inv_std[j];
          double dy = dcur.at(i, j);
          gw[kk][j] += dy * xhat;
          gb[kk][j] += dy;
          sum_dy += dy;
          sum_dy_xhat += dy * xhat;
        }
        if (c.batch_stats) {
          // full BN backward through the batch statistics
          double ninv = 1.0 / double(x.rows);
          for (std::size_t i = 0; i < x.rows; ++i) {
            double xhat = (x.at(i, j) - c.mu[j]) * c.inv_std[j];
            double dy = dcur.at(i, j);
            dx.at(i, j) = bn->gamma[j] * c.inv_std[j] *
                          (dy - ninv * sum_dy - xhat * ninv * sum_dy_xhat);
          }
        } else {
          // running statistics are constants w.r.t. theta
          for (std::size_t i = 0; i < x.rows; ++i)
            dx.at(i, j) = dcur.at(i, j) * bn->gamma[j] * c.inv_std[j];
        }
      }
      dcur = std::move(dx);
    } else {
      for (std::size_t i = 0; i < x.rows; ++i)
        for (std::size_t j = 0; j < x.cols; ++j)
          if (x.at(i, j) <= 0.0) dcur.at(i, j) = 0.0;
    }
  }

  LossGrad out;
  out.loss = loss;
  for (std::size_t k = 0; k < m.layers.size(); ++k) {
    if (std::holds_alternative<ReluLayer>(m.layers[k])) continue;
    out.grad.data.insert(out.grad.data.end(), gw[k].begin(), gw[k].end());
    out.grad.data.insert(out.grad.data.end(), gb[k].begin(), gb[k].end());
  }
  require_finite(out.grad.data, "gradient");
  return out;
}

ParamVector sgd_step(const ParamVector& theta, const ParamVector& g,
                     const GroupMap& map, const std::vector<double>& eta) {
  if (theta.size() != g.size() || theta.size() != map.total)
    throw ShapeError("sgd_step: length mismatch");
  if (eta.size() != map.groups.size())
    throw ShapeError("sgd_step: learning-rate count != group count");
  ParamVector out = theta;
  for (std::size_t k = 0; k < map.groups.size(); ++k) {
    const auto& grp = map.groups[k];
    for (std::size_t i = grp.offset; i < grp.offset + grp.size; ++i)
      out.data[i] -= eta[k] * g.data[i];
  }
  return out;
}

FinetuneResult finetune(const ModelState& theta_g, const DataSet& train,
                        const BNMode& mode, const std::vector<double>& eta,
                        const FinetuneOptions& opt) {
  GroupMap map = group_map(theta_g);
  FinetuneResult res;
  res.model = theta_g;
  ParamVector theta = flatten(theta_g);
  res.pre_step = theta;

  std::size_t n = train.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(opt.seed);

  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < n; start += opt.batch_size) {
      std::size_t end = std::min(n, start + opt.batch_size);
      std::vector<std::size_t> idx(order.begin() + start, order.begin() + end);
      DataSet batch = subset(train, idx);
      unflatten(theta, res.model);
      LossGrad lg;
      try {
        lg = grad(res.model, batch.x, batch.y, mode);
      } catch (const NumericalError&) {
        res.diverged = true;
        return res;
      }
      res.pre_step = theta;
      res.last_batch = idx;
      theta = sgd_step(theta, lg.grad, map, eta);
      res.final_loss = lg.loss;
      if (!std::isfinite(lg.loss) || !all_finite(theta.data)) {
        res.diverged = true;
        return res;
      }
    }
  }
  unflatten(theta, res.model);
  return res;
}

namespace {

// Exact per-channel mean/variance of every BN layer's input over a dataset.
std::vector<std::pair<std::vector<double>, std::vector<double>>> bn_input_stats(
    const ModelState& m, const DataSet& data, const BNMode& mode) {
  if (data.size() == 0) throw ShapeError("bn input stats: empty dataset");
  ForwardCache cache;
  forward(m, data.x, mode, false, &cache);
  std::vector<std::pair<std::vector<double>, std::vector<double>>> out;
  for (std::size_t k = 0; k < m.layers.size(); ++k) {
    auto* bn = std::get_if<BatchNormLayer>(&m.layers[k]);
    if (!bn) continue;
    const Tensor& x = cache.inputs[k];
    std::vector<double> mu(bn->channels, 0.0), var(bn->channels, 0.0);
    for (std::size_t j = 0; j < bn->channels; ++j) {
      double s = 0;
      for (std::size_t i = 0; i < x.rows; ++i) s += x.at(i, j);
      mu[j] = s / double(x.rows);
      double sq = 0;
      for (std::size_t i = 0; i < x.rows; ++i) {
        double d = x.at(i, j) - mu[j];
        sq += d * d;
      }
      var[j] = sq / double(x.rows);
    }
    out.emplace_back(std::move(mu), std::move(var));
  }
  return out;
}

}  // namespace

void update_running_stats(ModelState& m, const DataSet& data) {
  auto stats = bn_input_stats(m, data, BNMode::global());
  std::size_t b = 0;
  for (auto& l : m.layers) {
    auto* bn = std::get_if<BatchNormLayer>(&l);
    if (!bn) continue;
    bn->mu_client = stats[b].first;
    bn->var_client = stats[b].second;
    ++b;
  }
}

void set_pretrained_stats(ModelState& m, const DataSet& data) {
  auto stats = bn_input_stats(m, data, BNMode::incoming());
  std::size_t b = 0;
  for (auto& l : m.layers) {
    auto* bn = std::get_if<BatchNormLayer>(&l);
    if (!bn) continue;
    bn->mu_pt = stats[b].first;
    bn->var_pt = stats[b].second;
    bn->mu_client = stats[b].first;
    bn->var_client = stats[b].second;
    ++b;
  }
}

double norm_inf(const std::vector<double>& v) {
  double m = 0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

double norm2(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

ParamVector hvp(const ParamVector& theta, const ParamVector& v,
                const GradFn& grad_at, double step) {
  if (step <= 0) throw NumericalError("hvp: step must be positive");
  if (theta.size() != v.size()) throw ShapeError("hvp: length mismatch");
  double nv = norm2(v.data);
  if (nv == 0.0) return ParamVector{std::vector<double>(theta.size(), 0.0)};
  double s = step * (1.0 + norm_inf(theta.data));
  ParamVector plus = theta, minus = theta;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    double d = s * v.data[i] / nv;
    plus.data[i] += d;
    minus.data[i] -= d;
  }
  ParamVector gp = grad_at(plus);
  ParamVector gm = grad_at(minus);
  ParamVector out;
  out.data.resize(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i)
    out.data[i] = (gp.data[i] - gm.data[i]) * nv / (2.0 * s);
  require_finite(out.data, "hvp");
  return out;
}

}  // namespace fedl2p
