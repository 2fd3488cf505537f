#include "fedl2p/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <queue>

#include <Eigen/Dense>
#include <json.hpp>

namespace fedl2p {

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::FtBnC: return "ft-bn-c";
    case Strategy::FtBnG: return "ft-bn-g";
    case Strategy::FtBnI: return "ft-bn-i";
    case Strategy::FedL2P: return "fedl2p";
    case Strategy::L2P: return "l2p";
  }
  return "?";
}

std::optional<Strategy> parse_strategy(const std::string& s) {
  if (s == "ft-bn-c") return Strategy::FtBnC;
  if (s == "ft-bn-g") return Strategy::FtBnG;
  if (s == "ft-bn-i") return Strategy::FtBnI;
  if (s == "fedl2p") return Strategy::FedL2P;
  if (s == "l2p") return Strategy::L2P;
  return std::nullopt;
}

double sparsity(const std::vector<double>& eta,
                const std::vector<std::size_t>& group_sizes, double tol) {
  if (eta.size() != group_sizes.size())
    throw ShapeError("sparsity: eta / group count mismatch");
  if (tol < 0) throw std::invalid_argument("sparsity: tol must be >= 0");
  std::size_t frozen = 0, total = 0;
  for (std::size_t k = 0; k < eta.size(); ++k) {
    total += group_sizes[k];
    if (std::abs(eta[k]) <= tol) frozen += group_sizes[k];
  }
  return total ? double(frozen) / double(total) : 0.0;
}

MetaParams l2p_local(const ModelState& theta_g, const ClientData& client,
                     int budget, const FLConfig& cfg) {
  ClientContext ctx = make_client_context(theta_g, client);
  MetaParams lambda =
      init_meta(theta_g.param_layer_count(), theta_g.bn_count(), cfg.base_lr,
                derive_seed(cfg.seed, "meta_init"));
  for (int t = 1; t <= budget; ++t) {
    ClientRoundResult r = client_meta_round(lambda, ctx, client, cfg, t);
    if (r.diverged) break;  // keep the last usable lambda
    lambda = r.lambda;
  }
  return lambda;
}

namespace {

std::vector<std::size_t> group_param_counts(const ModelState& m) {
  GroupMap map = group_map(m);
  std::vector<std::size_t> out;
  for (const auto& g : map.groups) out.push_back(g.size);
  return out;
}

}  // namespace

EvalReport personalize_eval(const ModelState& theta_g,
                            const std::vector<ClientData>& clients, Strategy strategy,
                            const MetaParams* lambda, const EvalOptions& opt) {
  EvalReport report;
  report.strategy = to_string(strategy);
  GroupMap map = group_map(theta_g);
  std::vector<std::size_t> sizes = group_param_counts(theta_g);
  double tol = 1e-8 * opt.base_lr;

  if (strategy == Strategy::FedL2P && !lambda)
    throw std::invalid_argument("personalize_eval: strategy needs meta params");

  for (const auto& client : clients) {
    ClientContext ctx = make_client_context(theta_g, client);
    ClientEval ce;
    ce.id = client.id;
    ce.domain = client.domain;

    MetaParams local;
    const MetaParams* lam = lambda;
    if (strategy == Strategy::L2P) {
      FLConfig lcfg;
      lcfg.num_clients = 1;
      lcfg.fraction = 1.0;
      lcfg.local_epochs = opt.l2p_local_epochs;
      lcfg.batch_size = opt.batch_size;
      lcfg.base_lr = opt.base_lr;
      lcfg.seed = opt.seed;
      lcfg.hg = opt.hg;
      local = l2p_local(theta_g, client, opt.l2p_budget, lcfg);
      lam = &local;
    }

    BNMode mode = BNMode::global();
    std::vector<double> eta(map.groups.size(), opt.base_lr);
    switch (strategy) {
      case Strategy::FtBnC: mode = BNMode::client(); break;
      case Strategy::FtBnG: mode = BNMode::global(); break;
      case Strategy::FtBnI: mode = BNMode::incoming(); break;
      case Strategy::FedL2P:
      case Strategy::L2P: {
        std::vector<double> beta = bnnet_forward(*lam, ctx.profile.xi);
        LrNetOut lr = lrnet_forward(*lam, ctx.profile.feat_stats);
        mode = BNMode::mixed(beta);
        eta = lr.eta;
        break;
      }
    }
    ce.sparsity = sparsity(eta, sizes, tol);

    for (int rep = 0; rep < opt.repeats; ++rep) {
      ModelState personalized = ctx.model;
      if (opt.epochs > 0) {
        FinetuneOptions fopt;
        fopt.epochs = std::size_t(opt.epochs);
        fopt.batch_size = std::size_t(opt.batch_size);
        fopt.seed = derive_seed(opt.seed, "personalize", std::uint64_t(rep),
                                std::uint64_t(client.id));
        FinetuneResult ft = finetune(ctx.model, client.train, mode, eta, fopt);
        if (ft.diverged) {
          ce.diverged = true;
          ce.acc.push_back(0.0);
          continue;
        }
        personalized = ft.model;
      }
      Tensor logits = forward(personalized, client.test.x, mode, false);
      ce.acc.push_back(accuracy(logits, client.test.y));
      if (rep == 0) {
        Tensor vl = forward(personalized, client.val.x, mode, false);
        ce.val_loss = cross_entropy(vl, client.val.y);
      }
    }
    ce.mean_acc = ce.acc.empty() ? 0.0
                                 : std::accumulate(ce.acc.begin(), ce.acc.end(), 0.0) /
                                       double(ce.acc.size());
    report.clients.push_back(std::move(ce));
  }

  // per-repeat client mean, then mean +- SD over the repeats
  int repeats = opt.repeats;
  std::vector<double> per_rep(repeats, 0.0);
  for (int rep = 0; rep < repeats; ++rep) {
    double s = 0;
    int n = 0;
    for (const auto& c : report.clients)
      if (rep < int(c.acc.size())) {
        s += c.acc[rep];
        ++n;
      }
    per_rep[rep] = n ? s / n : 0.0;
  }
  double mean = std::accumulate(per_rep.begin(), per_rep.end(), 0.0) / repeats;
  double var = 0;
  for (double a : per_rep) var += (a - mean) * (a - mean);
  report.mean_acc = mean;
  report.sd_acc = std::sqrt(var / repeats);
  return report;
}

double ari(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size()) throw ShapeError("ari: length mismatch");
  if (a.size() < 2) throw std::invalid_argument("ari: need at least 2 points");
  auto compact = [](const std::vector<int>& v) {
    std::vector<int> out(v.size());
    std::vector<int> seen;
    for (std::size_t i = 0; i < v.size(); ++i) {
      auto it = std::find(seen.begin(), seen.end(), v[i]);
      if (it == seen.end()) {
        seen.push_back(v[i]);
        out[i] = int(seen.size()) - 1;
      } else {
        out[i] = int(it - seen.begin());
      }
    }
    return std::pair(out, seen.size());
  };
  auto [ca, ka] = compact(a);
  auto [cb, kb] = compact(b);
  std::vector<std::vector<long long>> table(ka, std::vector<long long>(kb, 0));
  for (std::size_t i = 0; i < ca.size(); ++i) ++table[ca[i]][cb[i]];

  auto choose2 = [](long long n) { return n * (n - 1) / 2; };
  long long sum_ij = 0;
  std::vector<long long> ai(ka, 0), bj(kb, 0);
  for (std::size_t i = 0; i < ka; ++i)
    for (std::size_t j = 0; j < kb; ++j) {
      sum_ij += choose2(table[i][j]);
      ai[i] += table[i][j];
      bj[j] += table[i][j];
    }
  long long sum_a = 0, sum_b = 0;
  for (long long v : ai) sum_a += choose2(v);
  for (long long v : bj) sum_b += choose2(v);
  double total = double(choose2((long long)a.size()));
  double expected = double(sum_a) * double(sum_b) / total;
  double max_index = 0.5 * double(sum_a + sum_b);
  double denom = max_index - expected;
  if (denom == 0.0) return 1.0;  // both partitions degenerate and identical
  return (double(sum_ij) - expected) / denom;
}

std::vector<std::vector<double>> pairwise_distances(
    const std::vector<std::vector<double>>& vectors) {
  std::size_t n = vectors.size();
  std::vector<std::vector<double>> d(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < vectors[i].size(); ++k) {
        double diff = vectors[i][k] - vectors[j][k];
        s += diff * diff;
      }
      d[i][j] = d[j][i] = std::sqrt(s);
    }
  return d;
}

std::vector<std::vector<double>> cluster_distance_map(
    const std::vector<std::vector<double>>& vectors, const std::vector<int>& domains,
    double cap, double floor) {
  if (vectors.size() != domains.size())
    throw ShapeError("cluster_distance_map: size mismatch");
  std::vector<int> uniq = domains;
  std::sort(uniq.begin(), uniq.end());
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
  std::size_t nd = uniq.size();
  auto dom_index = [&](int d) {
    return std::size_t(std::find(uniq.begin(), uniq.end(), d) - uniq.begin());
  };
  auto dist = pairwise_distances(vectors);

  std::vector<std::vector<double>> mean_d(nd, std::vector<double>(nd, 0.0));
  std::vector<std::vector<long long>> cnt(nd, std::vector<long long>(nd, 0));
  for (std::size_t i = 0; i < vectors.size(); ++i)
    for (std::size_t j = i + 1; j < vectors.size(); ++j) {
      std::size_t a = dom_index(domains[i]), b = dom_index(domains[j]);
      mean_d[a][b] += dist[i][j];
      ++cnt[a][b];
      if (a != b) {
        mean_d[b][a] += dist[i][j];
        ++cnt[b][a];
      }
    }
  for (std::size_t a = 0; a < nd; ++a)
    for (std::size_t b = 0; b < nd; ++b) {
      if (a == b && cnt[a][b] == 0)
        throw std::invalid_argument(
            "cluster_distance_map: need >= 2 clients per domain");
      if (cnt[a][b]) mean_d[a][b] /= double(cnt[a][b]);
    }

  std::vector<std::vector<double>> out(nd, std::vector<double>(nd, 0.0));
  for (std::size_t a = 0; a < nd; ++a)
    for (std::size_t b = 0; b < nd; ++b) {
      if (a == b) continue;  // 0 by construction
      double da = std::max(mean_d[a][a], floor);
      double db = std::max(mean_d[b][b], floor);
      double v = std::log(std::max(mean_d[a][b], floor) / std::sqrt(da * db));
      out[a][b] = std::clamp(v, -cap, cap);
    }
  return out;
}

namespace {

std::vector<int> kmeans(const std::vector<std::vector<double>>& pts, int k,
                        std::uint64_t seed) {
  std::size_t n = pts.size();
  std::size_t dim = pts.empty() ? 0 : pts[0].size();
  std::vector<int> labels(n, 0);
  if (k <= 1 || n == 0) return labels;
  Rng rng(seed);

  auto sq_dist = [&](const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (std::size_t i = 0; i < dim; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s;
  };

  // k-means++ seeding
  std::vector<std::vector<double>> centers;
  std::uniform_int_distribution<std::size_t> first(0, n - 1);
  centers.push_back(pts[first(rng)]);
  std::vector<double> d2(n);
  while (int(centers.size()) < k) {
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& c : centers) best = std::min(best, sq_dist(pts[i], c));
      d2[i] = best;
      total += best;
    }
    if (total == 0) {
      centers.push_back(pts[first(rng)]);
      continue;
    }
    std::uniform_real_distribution<double> unit(0.0, total);
    double u = unit(rng);
    std::size_t pick = n - 1;
    for (std::size_t i = 0; i < n; ++i) {
      if (u < d2[i]) {
        pick = i;
        break;
      }
      u -= d2[i];
    }
    centers.push_back(pts[pick]);
  }

  for (int iter = 0; iter < 100; ++iter) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      int best = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (int c = 0; c < k; ++c) {
        double d = sq_dist(pts[i], centers[c]);
        if (d < bd) {
          bd = d;
          best = c;
        }
      }
      if (best != labels[i]) {
        labels[i] = best;
        changed = true;
      }
    }
    std::vector<std::vector<double>> nc(k, std::vector<double>(dim, 0.0));
    std::vector<int> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++counts[labels[i]];
      for (std::size_t j = 0; j < dim; ++j) nc[labels[i]][j] += pts[i][j];
    }
    for (int c = 0; c < k; ++c)
      if (counts[c])
        for (std::size_t j = 0; j < dim; ++j) nc[c][j] /= counts[c];
      else
        nc[c] = centers[c];  // empty cluster keeps its center
    centers = std::move(nc);
    if (!changed) break;
  }
  return labels;
}

}  // namespace

SpectralResult spectral_cluster(const std::vector<std::vector<double>>& vectors,
                                int k, std::uint64_t seed) {
  SpectralResult res;
  std::size_t n = vectors.size();
  if (k > int(n)) throw std::invalid_argument("spectral_cluster: k > point count");
  if (k <= 1 || n == 0) {
    res.labels.assign(n, 0);
    return res;
  }
  auto dist = pairwise_distances(vectors);

  // median-heuristic bandwidth
  std::vector<double> offdiag;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) offdiag.push_back(dist[i][j]);
  std::nth_element(offdiag.begin(), offdiag.begin() + offdiag.size() / 2, offdiag.end());
  double sigma = std::max(offdiag[offdiag.size() / 2], 1e-12);

  Eigen::MatrixXd affinity(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      affinity(i, j) =
          i == j ? 0.0 : std::exp(-dist[i][j] * dist[i][j] / (2.0 * sigma * sigma));

  // connectivity check (exp can underflow to exactly 0)
  std::vector<bool> seen(n, false);
  std::queue<std::size_t> q;
  q.push(0);
  seen[0] = true;
  std::size_t reached = 1;
  while (!q.empty()) {
    std::size_t i = q.front();
    q.pop();
    for (std::size_t j = 0; j < n; ++j)
      if (!seen[j] && affinity(i, j) > 0.0) {
        seen[j] = true;
        ++reached;
        q.push(j);
      }
  }
  if (reached < n) {
    res.fallback = true;
    res.labels = kmeans(vectors, k, derive_seed(seed, "kmeans_fallback"));
    return res;
  }

  Eigen::VectorXd deg = affinity.rowwise().sum();
  Eigen::VectorXd dinv = deg.array().max(1e-300).pow(-0.5);
  Eigen::MatrixXd m = dinv.asDiagonal() * affinity * dinv.asDiagonal();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  // top-k eigenvectors of D^{-1/2} A D^{-1/2} = bottom-k of the normalized Laplacian
  Eigen::MatrixXd embed = es.eigenvectors().rightCols(k);
  std::vector<std::vector<double>> rows(n, std::vector<double>(k, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    double norm = embed.row(i).norm();
    for (int j = 0; j < k; ++j)
      rows[i][j] = norm > 0 ? embed(i, j) / norm : embed(i, j);
  }
  res.labels = kmeans(rows, k, derive_seed(seed, "kmeans"));
  return res;
}

ClusterAnalysis analyze_clusters(const ModelState& theta_g,
                                 const std::vector<ClientData>& clients,
                                 const MetaParams& lambda, int k, std::uint64_t seed) {
  ClusterAnalysis out;
  std::vector<std::vector<double>> xi, x, beta, eta;
  for (const auto& c : clients) {
    ClientContext ctx = make_client_context(theta_g, c);
    out.domain_labels.push_back(c.domain);
    xi.push_back(ctx.profile.xi);
    x.push_back(ctx.profile.feat_stats);
    beta.push_back(bnnet_forward(lambda, ctx.profile.xi));
    eta.push_back(lrnet_forward(lambda, ctx.profile.feat_stats).eta);
  }
  std::vector<std::vector<double>>* all[] = {&xi, &x, &beta, &eta};
  const char* names[] = {"xi", "x", "beta", "eta"};
  for (int q = 0; q < 4; ++q) {
    ClusterQuantity cq;
    cq.name = names[q];
    cq.vectors = *all[q];
    SpectralResult sr = spectral_cluster(cq.vectors, k, derive_seed(seed, names[q]));
    cq.labels = sr.labels;
    cq.fallback = sr.fallback;
    cq.ari = ari(cq.labels, out.domain_labels);
    cq.distance_map = cluster_distance_map(cq.vectors, out.domain_labels);
    out.quantities.push_back(std::move(cq));
  }
  return out;
}

// ---- report IO ----

using nlohmann::json;

void save_eval_report_json(const EvalReport& r, const std::string& path) {
  json clients = json::array();
  for (const auto& c : r.clients)
    clients.push_back({{"id", c.id},
                       {"domain", c.domain},
                       {"acc", c.acc},
                       {"mean_acc", c.mean_acc},
                       {"val_loss", c.val_loss},
                       {"sparsity", c.sparsity},
                       {"diverged", c.diverged}});
  json doc{{"strategy", r.strategy},
           {"mean_acc", r.mean_acc},
           {"sd_acc", r.sd_acc},
           {"clients", clients}};
  std::ofstream f(path);
  if (!f) throw std::runtime_error("save_eval_report_json: cannot open " + path);
  f << doc.dump(2) << "\n";
}

EvalReport load_eval_report_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("load_eval_report_json: cannot open " + path);
  json doc;
  try {
    doc = json::parse(f);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
  EvalReport r;
  r.strategy = doc.at("strategy").get<std::string>();
  r.mean_acc = doc.at("mean_acc").get<double>();
  r.sd_acc = doc.at("sd_acc").get<double>();
  for (const auto& c : doc.at("clients")) {
    ClientEval ce;
    ce.id = c.at("id").get<int>();
    ce.domain = c.at("domain").get<int>();
    ce.acc = c.at("acc").get<std::vector<double>>();
    ce.mean_acc = c.at("mean_acc").get<double>();
    ce.val_loss = c.at("val_loss").get<double>();
    ce.sparsity = c.at("sparsity").get<double>();
    ce.diverged = c.at("diverged").get<bool>();
    r.clients.push_back(std::move(ce));
  }
  return r;
}

void save_eval_report_csv(const EvalReport& r, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("save_eval_report_csv: cannot open " + path);
  f.precision(17);
  f << "client_id,domain,repeat,accuracy,val_loss,sparsity,diverged\n";
  for (const auto& c : r.clients)
    for (std::size_t rep = 0; rep < c.acc.size(); ++rep)
      f << c.id << "," << c.domain << "," << rep << "," << c.acc[rep] << ","
        << c.val_loss << "," << c.sparsity << "," << (c.diverged ? 1 : 0) << "\n";
}

}  // namespace fedl2p
