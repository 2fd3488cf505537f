#include "fedl2p/data_gen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

namespace fedl2p {

DataSet apply_transform(const DomainTransform& t, const DataSet& d) {
  DataSet out;
  out.y = d.y;
  out.x = Tensor(d.x.rows, d.x.cols);
  std::size_t n = t.dims;
  for (std::size_t i = 0; i < d.x.rows; ++i) {
    const double* xi = d.x.row(i);
    double* yi = out.x.row(i);
    for (std::size_t r = 0; r < n; ++r) {
      double acc = t.shift[r];
      const double* row = t.linear.data() + r * n;
      for (std::size_t c = 0; c < n; ++c) acc += row[c] * xi[c];
      yi[r] = acc;
    }
  }
  return out;
}

DataSet GaussianMixture::sample(std::size_t n, Rng& rng) const {
  DataSet out;
  out.x = Tensor(n, dims);
  out.y.resize(n);
  std::uniform_int_distribution<int> cls(0, int(classes) - 1);
  std::normal_distribution<double> gauss(0.0, noise);
  for (std::size_t i = 0; i < n; ++i) {
    int c = cls(rng);
    out.y[i] = c;
    for (std::size_t j = 0; j < dims; ++j)
      out.x.at(i, j) = means[c * dims + j] + gauss(rng);
  }
  return out;
}

DataSet GaussianMixture::sample_class(int label, std::size_t n, Rng& rng) const {
  DataSet out;
  out.x = Tensor(n, dims);
  out.y.assign(n, label);
  std::normal_distribution<double> gauss(0.0, noise);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < dims; ++j)
      out.x.at(i, j) = means[label * dims + j] + gauss(rng);
  return out;
}

GaussianMixture make_base_task(const DataGenSpec& spec) {
  GaussianMixture gm;
  gm.dims = spec.dims;
  gm.classes = spec.classes;
  gm.noise = spec.noise;
  gm.means.resize(spec.classes * spec.dims);
  Rng rng = make_rng(spec.seed, "task");
  std::normal_distribution<double> gauss(0.0, spec.class_spread);
  for (auto& v : gm.means) v = gauss(rng);
  return gm;
}

std::vector<DomainTransform> make_domains(const DataGenSpec& spec) {
  std::vector<DomainTransform> out;
  std::size_t n = spec.dims;
  for (int d = 0; d < spec.domains; ++d) {
    DomainTransform t;
    t.dims = n;
    t.linear.assign(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) t.linear[i * n + i] = 1.0;
    t.shift.assign(n, 0.0);
    if (d > 0) {
      Rng rng = make_rng(spec.seed, "domain", std::uint64_t(d));
      // a handful of Givens rotations
      std::normal_distribution<double> ang(0.0, spec.domain_rotation);
      std::uniform_int_distribution<std::size_t> axis(0, n - 1);
      for (std::size_t k = 0; k < n; ++k) {
        std::size_t i = axis(rng), j = axis(rng);
        if (i == j) continue;
        double th = ang(rng), c = std::cos(th), s = std::sin(th);
        for (std::size_t col = 0; col < n; ++col) {
          double a = t.linear[i * n + col], b = t.linear[j * n + col];
          t.linear[i * n + col] = c * a - s * b;
          t.linear[j * n + col] = s * a + c * b;
        }
      }
      // per-axis scale jitter, bounded away from zero (keeps it invertible)
      std::uniform_real_distribution<double> sc(1.0 / spec.domain_scale,
                                                spec.domain_scale);
      for (std::size_t i = 0; i < n; ++i) {
        double s = sc(rng);
        for (std::size_t col = 0; col < n; ++col) t.linear[i * n + col] *= s;
      }
      std::normal_distribution<double> gauss(0.0, 1.0);
      std::vector<double> dir(n);
      double nn = 0;
      for (auto& v : dir) {
        v = gauss(rng);
        nn += v * v;
      }
      nn = std::sqrt(nn);
      for (std::size_t i = 0; i < n; ++i)
        t.shift[i] = spec.domain_shift * dir[i] / (nn > 0 ? nn : 1.0);
    }
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<std::vector<std::size_t>> dirichlet_partition(
    const std::vector<int>& labels, std::size_t n_clients, std::size_t per_client,
    double alpha, std::size_t n_classes, Rng& rng) {
  if (alpha <= 0) throw std::invalid_argument("dirichlet_partition: alpha must be > 0");
  if (labels.size() < n_clients * per_client)
    throw std::invalid_argument("dirichlet_partition: pool too small");

  std::vector<std::vector<std::size_t>> pools(n_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) pools[labels[i]].push_back(i);
  for (auto& p : pools) std::shuffle(p.begin(), p.end(), rng);

  std::gamma_distribution<double> gamma(alpha, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::vector<std::vector<std::size_t>> out(n_clients);
  for (std::size_t i = 0; i < n_clients; ++i) {
    std::vector<double> prop(n_classes);
    double sum = 0;
    for (auto& p : prop) {
      p = gamma(rng);
      sum += p;
    }
    for (auto& p : prop) p /= sum;

    out[i].reserve(per_client);
    for (std::size_t s = 0; s < per_client; ++s) {
      // categorical over classes with remaining pool, renormalized
      double total = 0;
      for (std::size_t c = 0; c < n_classes; ++c)
        if (!pools[c].empty()) total += prop[c];
      if (total == 0.0) {
        // only exhausted classes carried the client's mass; fall back to
        // uniform over whatever is left
        std::size_t left = 0;
        for (auto& p : pools) left += p.size();
        if (left == 0) throw std::runtime_error("dirichlet_partition: pool exhausted");
        double u = unit(rng) * double(left);
        for (std::size_t c = 0; c < n_classes; ++c) {
          if (pools[c].empty()) continue;
          if (u < double(pools[c].size())) {
            out[i].push_back(pools[c].back());
            pools[c].pop_back();
            break;
          }
          u -= double(pools[c].size());
        }
        continue;
      }
      std::size_t last_viable = 0;
      for (std::size_t c = 0; c < n_classes; ++c)
        if (!pools[c].empty()) last_viable = c;
      double u = unit(rng) * total;
      for (std::size_t c = 0; c < n_classes; ++c) {
        if (pools[c].empty()) continue;
        if (u < prop[c] || c == last_viable) {
          // the last viable class absorbs fp drift in the cumulative sum
          out[i].push_back(pools[c].back());
          pools[c].pop_back();
          break;
        }
        u -= prop[c];
      }
    }
  }
  return out;
}

SplitIdx split_indices(std::size_t n, double train_frac, double val_frac,
                       double test_frac, Rng& rng) {
  if (std::abs(train_frac + val_frac + test_frac - 1.0) > 1e-9)
    throw std::invalid_argument("split_indices: fractions must sum to 1");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t n_train = std::size_t(std::floor(train_frac * double(n)));
  std::size_t n_val = std::size_t(std::floor(val_frac * double(n)));
  SplitIdx s;
  s.train.assign(order.begin(), order.begin() + n_train);
  s.val.assign(order.begin() + n_train, order.begin() + n_train + n_val);
  s.test.assign(order.begin() + n_train + n_val, order.end());
  if ((train_frac > 0 && s.train.empty()) || (val_frac > 0 && s.val.empty()) ||
      (test_frac > 0 && s.test.empty()))
    throw std::runtime_error("split_indices: empty split");
  return s;
}

GeneratedData generate(const DataGenSpec& spec) {
  GaussianMixture gm = make_base_task(spec);
  std::vector<DomainTransform> domains = make_domains(spec);

  GeneratedData gen;
  // clients spread evenly over domains
  std::vector<std::vector<int>> clients_of_domain(spec.domains);
  for (int i = 0; i < spec.clients; ++i)
    clients_of_domain[i % spec.domains].push_back(i);
  gen.clients.resize(spec.clients);

  for (int d = 0; d < spec.domains; ++d) {
    const auto& ids = clients_of_domain[d];
    if (ids.empty()) continue;
    std::size_t total = ids.size() * spec.samples_per_client;
    // balanced class pool of exactly the needed size
    Rng pool_rng = make_rng(spec.seed, "pool", std::uint64_t(d));
    DataSet pool;
    pool.x = Tensor(total, spec.dims);
    pool.y.resize(total);
    std::size_t w = 0;
    for (std::size_t c = 0; c < spec.classes; ++c) {
      std::size_t n_c = total / spec.classes + (c < total % spec.classes ? 1 : 0);
      DataSet part = gm.sample_class(int(c), n_c, pool_rng);
      for (std::size_t i = 0; i < n_c; ++i, ++w) {
        for (std::size_t j = 0; j < spec.dims; ++j) pool.x.at(w, j) = part.x.at(i, j);
        pool.y[w] = part.y[i];
      }
    }
    pool = apply_transform(domains[d], pool);

    Rng part_rng = make_rng(spec.seed, "partition", std::uint64_t(d));
    auto idx = dirichlet_partition(pool.y, ids.size(), spec.samples_per_client,
                                   spec.alpha, spec.classes, part_rng);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      DataSet mine = subset(pool, idx[k]);
      Rng split_rng = make_rng(spec.seed, "split", std::uint64_t(ids[k]));
      SplitIdx s = split_indices(mine.size(), 0.64, 0.16, 0.20, split_rng);
      ClientData& cd = gen.clients[ids[k]];
      cd.id = ids[k];
      cd.domain = d;
      cd.train = subset(mine, s.train);
      cd.val = subset(mine, s.val);
      cd.test = subset(mine, s.test);
    }
  }

  Rng pre_rng = make_rng(spec.seed, "pretrain");
  gen.pretrain_pool =
      gm.sample(spec.pretrain_clients * spec.pretrain_samples_per_client, pre_rng);
  return gen;
}

void export_clients_csv(const std::string& path, const GeneratedData& data) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("export_clients_csv: cannot open " + path);
  f.precision(17);
  std::size_t dims = data.pretrain_pool.dim();
  for (std::size_t j = 0; j < dims; ++j) f << "f" << j << ",";
  f << "label,client_id,domain_id,split\n";
  auto dump = [&](const DataSet& d, int client, int domain, const char* split) {
    for (std::size_t i = 0; i < d.size(); ++i) {
      for (std::size_t j = 0; j < dims; ++j) f << d.x.at(i, j) << ",";
      f << d.y[i] << "," << client << "," << domain << "," << split << "\n";
    }
  };
  for (const auto& c : data.clients) {
    dump(c.train, c.id, c.domain, "train");
    dump(c.val, c.id, c.domain, "val");
    dump(c.test, c.id, c.domain, "test");
  }
  dump(data.pretrain_pool, -1, 0, "pretrain");
}

GeneratedData import_clients_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("import_clients_csv: cannot open " + path);
  std::string header;
  if (!std::getline(f, header))
    throw std::runtime_error("import_clients_csv: empty file " + path);
  std::size_t dims = std::count(header.begin(), header.end(), ',') - 3;

  struct Row {
    std::vector<double> x;
    int y, client, domain;
    std::string split;
  };
  std::vector<Row> rows;
  std::string line;
  std::size_t lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string tok;
    Row r;
    try {
      for (std::size_t j = 0; j < dims; ++j) {
        std::getline(ss, tok, ',');
        r.x.push_back(std::stod(tok));
      }
      std::getline(ss, tok, ',');
      r.y = std::stoi(tok);
      std::getline(ss, tok, ',');
      r.client = std::stoi(tok);
      std::getline(ss, tok, ',');
      r.domain = std::stoi(tok);
      std::getline(ss, r.split, ',');
    } catch (const std::exception&) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) +
                               ": malformed CSV row");
    }
    rows.push_back(std::move(r));
  }

  GeneratedData out;
  std::map<int, std::map<std::string, std::vector<const Row*>>> by_client;
  std::vector<const Row*> pretrain;
  for (const auto& r : rows) {
    if (r.client < 0)
      pretrain.push_back(&r);
    else
      by_client[r.client][r.split].push_back(&r);
  }
  auto build = [&](const std::vector<const Row*>& rs) {
    DataSet d;
    d.x = Tensor(rs.size(), dims);
    d.y.resize(rs.size());
    for (std::size_t i = 0; i < rs.size(); ++i) {
      for (std::size_t j = 0; j < dims; ++j) d.x.at(i, j) = rs[i]->x[j];
      d.y[i] = rs[i]->y;
    }
    return d;
  };
  for (auto& [id, splits] : by_client) {
    ClientData cd;
    cd.id = id;
    cd.domain = splits.begin()->second.front()->domain;
    cd.train = build(splits["train"]);
    cd.val = build(splits["val"]);
    cd.test = build(splits["test"]);
    out.clients.push_back(std::move(cd));
  }
  out.pretrain_pool = build(pretrain);
  return out;
}

}  // namespace fedl2p
