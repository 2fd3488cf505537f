#include "fedl2p/federation.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <future>
#include <limits>
#include <numeric>

namespace fedl2p {

std::vector<double> fedavg_aggregate(
    const std::vector<std::pair<std::vector<double>, double>>& items) {
  if (items.empty()) throw std::invalid_argument("fedavg_aggregate: empty list");
  double total = 0;
  for (const auto& [v, n] : items) {
    if (n <= 0) throw std::invalid_argument("fedavg_aggregate: non-positive weight");
    if (v.size() != items.front().first.size())
      throw ShapeError("fedavg_aggregate: shape mismatch");
    total += n;
  }
  // If every contribution is bit-identical, return it unchanged so that a
  // round in which no client moved leaves the aggregate exactly fixed.
  bool all_same = true;
  for (std::size_t k = 1; k < items.size() && all_same; ++k)
    all_same = items[k].first == items.front().first;
  if (all_same) return items.front().first;
  std::vector<double> out(items.front().first.size(), 0.0);
  for (const auto& [v, n] : items) {
    double w = n / total;
    for (std::size_t i = 0; i < v.size(); ++i) out[i] += w * v[i];
  }
  return out;
}

std::vector<int> sample_clients(int total, double fraction, std::uint64_t seed,
                                int round) {
  if (fraction <= 0.0 || fraction > 1.0)
    throw std::invalid_argument("sample_clients: fraction must be in (0,1]");
  int k = int(std::ceil(fraction * double(total)));
  k = std::max(1, std::min(k, total));
  std::vector<int> ids(total);
  std::iota(ids.begin(), ids.end(), 0);
  Rng rng = make_rng(seed, "sample_clients", std::uint64_t(round));
  // partial Fisher-Yates
  for (int i = 0; i < k; ++i) {
    std::uniform_int_distribution<int> pick(i, total - 1);
    std::swap(ids[i], ids[pick(rng)]);
  }
  ids.resize(k);
  std::sort(ids.begin(), ids.end());
  return ids;
}

std::uint64_t checksum(const std::vector<double>& v) {
  std::uint64_t h = 14695981039346656037ull;
  for (double d : v) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, sizeof bits);
    for (int i = 0; i < 8; ++i) {
      h ^= (bits >> (8 * i)) & 0xff;
      h *= 1099511628211ull;
    }
  }
  return h;
}

ClientContext make_client_context(const ModelState& theta_g, const ClientData& client) {
  ClientContext ctx;
  ctx.model = theta_g;
  ctx.profile = build_profile(ctx.model, client.train);
  return ctx;
}

ClientRoundResult client_meta_round(const MetaParams& lambda_in,
                                    const ClientContext& ctx, const ClientData& client,
                                    const FLConfig& cfg, int round) {
  ClientRoundResult res;
  res.lambda = lambda_in;
  for (int k = 0; k < cfg.meta_iters; ++k) {
    std::vector<double> beta = bnnet_forward(res.lambda, ctx.profile.xi);
    LrNetOut lr = lrnet_forward(res.lambda, ctx.profile.feat_stats);

    FinetuneOptions opt;
    opt.epochs = std::size_t(cfg.local_epochs);
    opt.batch_size = std::size_t(cfg.batch_size);
    opt.seed = derive_seed(cfg.seed, "finetune",
                           std::uint64_t(round) * 1000003ull + std::uint64_t(k),
                           std::uint64_t(client.id));
    FinetuneResult ft =
        finetune(ctx.model, client.train, BNMode::mixed(beta), lr.eta, opt);
    if (ft.diverged) {
      res.diverged = true;
      return res;
    }
    ClientHypergrad hg = client_hypergradient(res.lambda, ctx.model, ft, ctx.profile,
                                              client.train, client.val, cfg.hg);
    if (!hg.finite) {
      res.diverged = true;
      return res;
    }
    res.val_loss = hg.val_loss;
    meta_update(res.lambda, hg.grad, cfg.hg);
  }
  if (cfg.meta_iters == 0) {
    // still report a validation loss for checkpoint bookkeeping
    std::vector<double> beta = bnnet_forward(res.lambda, ctx.profile.xi);
    LrNetOut lr = lrnet_forward(res.lambda, ctx.profile.feat_stats);
    FinetuneOptions opt;
    opt.epochs = std::size_t(cfg.local_epochs);
    opt.batch_size = std::size_t(cfg.batch_size);
    opt.seed = derive_seed(cfg.seed, "finetune", std::uint64_t(round) * 1000003ull,
                           std::uint64_t(client.id));
    FinetuneResult ft =
        finetune(ctx.model, client.train, BNMode::mixed(beta), lr.eta, opt);
    if (ft.diverged) {
      res.diverged = true;
      return res;
    }
    Tensor logits = forward(ft.model, client.val.x, BNMode::mixed(beta), false);
    res.val_loss = cross_entropy(logits, client.val.y);
  }
  return res;
}

FedL2PResult run_fedl2p(const ModelState& theta_g, const std::vector<ClientData>& clients,
                        const FLConfig& cfg) {
  // profiles depend only on theta_g and local data; computed once and cached
  std::vector<ClientContext> ctx;
  ctx.reserve(clients.size());
  for (const auto& c : clients) ctx.push_back(make_client_context(theta_g, c));

  std::size_t m_layers = theta_g.param_layer_count();
  std::size_t b_layers = theta_g.bn_count();
  MetaParams lambda =
      init_meta(m_layers, b_layers, cfg.base_lr, derive_seed(cfg.seed, "meta_init"));

  FedL2PResult res;
  res.best_lambda = lambda;
  res.best_val_loss = std::numeric_limits<double>::infinity();

  for (int t = 1; t <= cfg.rounds; ++t) {
    std::vector<int> ids = sample_clients(cfg.num_clients, cfg.fraction, cfg.seed, t);

    std::vector<ClientRoundResult> results(ids.size());
    auto work = [&](std::size_t slot) {
      int id = ids[slot];
      results[slot] = client_meta_round(lambda, ctx[id], clients[id], cfg, t);
    };
    if (cfg.parallelism > 1 && ids.size() > 1) {
      std::vector<std::future<void>> futs;
      for (std::size_t s = 0; s < ids.size(); ++s)
        futs.push_back(std::async(std::launch::async, work, s));
      for (auto& f : futs) f.get();
    } else {
      for (std::size_t s = 0; s < ids.size(); ++s) work(s);
    }

    RoundRecord rec;
    rec.round = t;
    std::vector<std::pair<std::vector<double>, double>> items;
    double val_sum = 0;
    int val_n = 0;
    for (std::size_t s = 0; s < ids.size(); ++s) {  // ids ascending: fixed order
      const auto& r = results[s];
      int n = int(clients[ids[s]].train.size());
      rec.clients.push_back({ids[s], r.val_loss, n, r.diverged});
      if (r.diverged) continue;
      items.emplace_back(flatten_meta(r.lambda), double(n));
      val_sum += r.val_loss;
      ++val_n;
    }
    if (items.empty()) {
      // all participants diverged: the round is a no-op
      rec.mean_val_loss = std::numeric_limits<double>::quiet_NaN();
      rec.lambda_checksum = checksum(flatten_meta(lambda));
      res.records.push_back(std::move(rec));
      continue;
    }
    unflatten_meta(fedavg_aggregate(items), lambda);
    rec.mean_val_loss = val_sum / double(val_n);
    rec.lambda_checksum = checksum(flatten_meta(lambda));
    res.records.push_back(rec);

    if (rec.mean_val_loss < res.best_val_loss) {
      res.best_val_loss = rec.mean_val_loss;
      res.best_round = t;
      res.best_lambda = lambda;
    }
  }
  res.final_lambda = lambda;
  if (res.best_round < 0) res.best_lambda = lambda;  // no usable round
  return res;
}

ModelState pretrain_fedavg(const ModelState& init,
                           const std::vector<DataSet>& client_train,
                           const PretrainConfig& cfg) {
  if (cfg.rounds < 1) throw std::invalid_argument("pretrain_fedavg: rounds >= 1");
  ModelState global = init;
  GroupMap map = group_map(init);
  double lr = cfg.lr;
  for (int t = 1; t <= cfg.rounds; ++t) {
    if (std::find(cfg.lr_drop_rounds.begin(), cfg.lr_drop_rounds.end(), t) !=
        cfg.lr_drop_rounds.end())
      lr *= 0.1;
    std::vector<int> ids =
        sample_clients(int(client_train.size()), cfg.fraction, cfg.seed, t);
    std::vector<double> eta(map.groups.size(), lr);
    std::vector<std::pair<std::vector<double>, double>> items;
    for (int id : ids) {
      FinetuneOptions opt;
      opt.epochs = 1;
      opt.batch_size = std::size_t(cfg.batch_size);
      opt.seed = derive_seed(cfg.seed, "pretrain", std::uint64_t(t), std::uint64_t(id));
      FinetuneResult ft =
          finetune(global, client_train[id], BNMode::incoming(), eta, opt);
      if (ft.diverged)
        throw NumericalError("pretrain_fedavg: client " + std::to_string(id) +
                             " diverged at round " + std::to_string(t));
      items.emplace_back(flatten(ft.model).data, double(client_train[id].size()));
    }
    ParamVector agg{fedavg_aggregate(items)};
    unflatten(agg, global);
  }
  return global;
}

void write_round_records_csv(const std::string& path,
                             const std::vector<RoundRecord>& records) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_round_records_csv: cannot open " + path);
  f.precision(17);
  f << "round,client_id,val_loss,n_samples,diverged\n";
  for (const auto& r : records)
    for (const auto& c : r.clients)
      f << r.round << "," << c.id << "," << c.val_loss << "," << c.n_samples << ","
        << (c.diverged ? 1 : 0) << "\n";
}

}  // namespace fedl2p
