#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>

#include <Eigen/Dense>

#include "fedl2p/data_gen.hpp"

using namespace fedl2p;

TEST_CASE("dirichlet partition conserves the pool and respects counts") {
  Rng rng(3);
  std::vector<int> labels;
  for (int c = 0; c < 4; ++c)
    for (int i = 0; i < 250; ++i) labels.push_back(c);

  auto parts = dirichlet_partition(labels, 8, 100, 0.5, 4, rng);
  REQUIRE(parts.size() == 8);
  std::set<std::size_t> seen;
  for (const auto& p : parts) {
    CHECK(p.size() == 100);
    for (std::size_t idx : p) {
      CHECK(idx < labels.size());
      CHECK(seen.insert(idx).second);  // no duplicates across clients
    }
  }
  CHECK(seen.size() == 800);
}

TEST_CASE("alpha = 1000 produces near-uniform class histograms") {
  Rng rng(7);
  std::vector<int> labels;
  for (int c = 0; c < 4; ++c)
    for (int i = 0; i < 30000; ++i) labels.push_back(c);
  auto parts = dirichlet_partition(labels, 10, 4000, 1000.0, 4, rng);
  // per-client shares have Dirichlet noise of a few percent, so check each
  // client loosely and the cross-client average tightly
  std::vector<double> mean_hist(4, 0.0);
  for (const auto& p : parts) {
    std::vector<double> hist(4, 0.0);
    for (std::size_t idx : p) hist[labels[idx]] += 1.0;
    for (int c = 0; c < 4; ++c) {
      CHECK(std::abs(hist[c] / 1000.0 - 1.0) < 0.12);
      mean_hist[c] += hist[c] / 10.0;
    }
  }
  for (double h : mean_hist) CHECK(std::abs(h / 1000.0 - 1.0) < 0.05);
}

TEST_CASE("alpha = 0.1 concentrates client mass on few classes") {
  std::vector<double> max_shares;
  for (int seed = 0; seed < 5; ++seed) {
    Rng rng(100 + seed);
    std::vector<int> labels;
    for (int c = 0; c < 4; ++c)
      for (int i = 0; i < 2000; ++i) labels.push_back(c);
    auto parts = dirichlet_partition(labels, 10, 200, 0.1, 4, rng);
    for (const auto& p : parts) {
      std::vector<double> hist(4, 0.0);
      for (std::size_t idx : p) hist[labels[idx]] += 1.0;
      max_shares.push_back(*std::max_element(hist.begin(), hist.end()) / 200.0);
    }
  }
  std::nth_element(max_shares.begin(), max_shares.begin() + max_shares.size() / 2,
                   max_shares.end());
  CHECK(max_shares[max_shares.size() / 2] >= 0.6);
}

TEST_CASE("mean max-class share is non-increasing in alpha") {
  auto mean_max_share = [](double alpha) {
    double total = 0;
    int count = 0;
    for (int seed = 0; seed < 20; ++seed) {
      Rng rng(500 + seed);
      std::vector<int> labels;
      for (int c = 0; c < 4; ++c)
        for (int i = 0; i < 1000; ++i) labels.push_back(c);
      auto parts = dirichlet_partition(labels, 6, 200, alpha, 4, rng);
      for (const auto& p : parts) {
        std::vector<double> hist(4, 0.0);
        for (std::size_t idx : p) hist[labels[idx]] += 1.0;
        total += *std::max_element(hist.begin(), hist.end()) / 200.0;
        ++count;
      }
    }
    return total / count;
  };
  double s01 = mean_max_share(0.1);
  double s1 = mean_max_share(1.0);
  double s1000 = mean_max_share(1000.0);
  CHECK(s01 >= s1);
  CHECK(s1 >= s1000);
}

TEST_CASE("split recipe: 100 samples -> 64/16/20, disjoint, deterministic") {
  Rng rng(11);
  SplitIdx s = split_indices(100, 0.64, 0.16, 0.20, rng);
  CHECK(s.train.size() == 64);
  CHECK(s.val.size() == 16);
  CHECK(s.test.size() == 20);
  std::set<std::size_t> all;
  for (const auto* part : {&s.train, &s.val, &s.test})
    for (std::size_t i : *part) CHECK(all.insert(i).second);
  CHECK(all.size() == 100);

  Rng rng2(11);
  SplitIdx s2 = split_indices(100, 0.64, 0.16, 0.20, rng2);
  CHECK(s2.train == s.train);
  CHECK(s2.val == s.val);

  Rng rng3(12);
  SplitIdx s3 = split_indices(50, 1.0, 0.0, 0.0, rng3);
  CHECK(s3.train.size() == 50);
  CHECK(s3.val.empty());
  CHECK(s3.test.empty());
}

TEST_CASE("domain transforms: identity domain 0, invertibility") {
  DataGenSpec spec;
  spec.dims = 5;
  spec.domains = 4;
  spec.seed = 21;
  auto domains = make_domains(spec);
  REQUIRE(domains.size() == 4);

  // domain 0 is the identity
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j)
      CHECK(domains[0].linear[i * 5 + j] == (i == j ? 1.0 : 0.0));
  for (double s : domains[0].shift) CHECK(s == 0.0);

  for (const auto& d : domains) {
    Eigen::MatrixXd a(5, 5);
    for (int i = 0; i < 25; ++i) a(i / 5, i % 5) = d.linear[i];
    CHECK(std::abs(a.determinant()) > 1e-8);
  }
}

TEST_CASE("generation: shapes, splits, domain assignment, determinism") {
  DataGenSpec spec;
  spec.dims = 4;
  spec.classes = 3;
  spec.samples_per_client = 100;
  spec.clients = 6;
  spec.domains = 3;
  spec.seed = 31;
  GeneratedData g = generate(spec);
  REQUIRE(g.clients.size() == 6);
  std::set<int> domains_seen;
  for (const auto& c : g.clients) {
    CHECK(c.train.size() == 64);
    CHECK(c.val.size() == 16);
    CHECK(c.test.size() == 20);
    CHECK(c.train.dim() == 4);
    for (int y : c.train.y) CHECK((y >= 0 && y < 3));
    domains_seen.insert(c.domain);
  }
  CHECK(domains_seen.size() == 3);
  CHECK(g.pretrain_pool.size() ==
        spec.pretrain_clients * spec.pretrain_samples_per_client);

  GeneratedData g2 = generate(spec);
  CHECK(g2.clients[3].train.x.data == g.clients[3].train.x.data);
  CHECK(g2.pretrain_pool.x.data == g.pretrain_pool.x.data);
}

TEST_CASE("CSV export/import round-trips the generated world") {
  DataGenSpec spec;
  spec.dims = 3;
  spec.classes = 3;
  spec.samples_per_client = 50;
  spec.clients = 4;
  spec.domains = 2;
  spec.seed = 41;
  GeneratedData g = generate(spec);
  std::string path = "datagen_roundtrip_test.csv";
  export_clients_csv(path, g);
  GeneratedData back = import_clients_csv(path);
  REQUIRE(back.clients.size() == g.clients.size());
  for (std::size_t i = 0; i < g.clients.size(); ++i) {
    CHECK(back.clients[i].id == g.clients[i].id);
    CHECK(back.clients[i].domain == g.clients[i].domain);
    CHECK(back.clients[i].train.x.data == g.clients[i].train.x.data);
    CHECK(back.clients[i].val.y == g.clients[i].val.y);
    CHECK(back.clients[i].test.x.data == g.clients[i].test.x.data);
  }
  CHECK(back.pretrain_pool.x.data == g.pretrain_pool.x.data);
  CHECK(back.pretrain_pool.y == g.pretrain_pool.y);
  std::remove(path.c_str());
}
