#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

#include "fedl2p/eval.hpp"
#include "fedl2p/rng.hpp"

using namespace fedl2p;

namespace {

GeneratedData small_world(std::uint64_t seed) {
  DataGenSpec spec;
  spec.dims = 4;
  spec.classes = 3;
  spec.samples_per_client = 60;
  spec.clients = 6;
  spec.domains = 2;
  spec.pretrain_clients = 2;
  spec.pretrain_samples_per_client = 100;
  spec.seed = seed;
  return generate(spec);
}

// meta params that force beta = beta_value everywhere and eta = base_lr
MetaParams forced_meta(const ModelState& m, double beta_raw, double base_lr) {
  MetaParams mp =
      init_meta(m.param_layer_count(), m.bn_count(), base_lr, 123, 4);
  std::fill(mp.bn_net.w3.begin(), mp.bn_net.w3.end(), 0.0);
  std::fill(mp.bn_net.b3.begin(), mp.bn_net.b3.end(), beta_raw);
  std::fill(mp.lr_net.w3.begin(), mp.lr_net.w3.end(), 0.0);
  std::fill(mp.lr_net.b3.begin(), mp.lr_net.b3.end(), 1.0);
  std::fill(mp.eta_tilde.begin(), mp.eta_tilde.end(), base_lr);
  return mp;
}

}  // namespace

TEST_CASE("sparsity is a parameter-weighted count") {
  std::vector<std::size_t> sizes{10, 10, 60, 20};
  CHECK(sparsity({0, 0, 0, 0}, sizes, 0.0) == 1.0);
  CHECK(sparsity({1e-3, 1e-3, 1e-3, 1e-3}, sizes, 1e-11) == 0.0);
  // groups 0+1+... freeze 10+10+... -> half the mass needs groups worth 50
  CHECK(sparsity({0, 0, 1e-3, 0}, sizes, 1e-11) == doctest::Approx(0.4));
  CHECK(sparsity({1e-3, 1e-3, 0, 1e-3}, sizes, 1e-11) == doctest::Approx(0.6));
  // permutation within equal-size groups leaves it unchanged
  CHECK(sparsity({0, 1e-3, 1e-3, 0}, sizes, 1e-11) ==
        sparsity({1e-3, 0, 1e-3, 0}, sizes, 1e-11));
  // monotone in tolerance
  std::vector<double> eta{1e-9, 5e-7, 1e-3, 2e-2};
  CHECK(sparsity(eta, sizes, 1e-12) <= sparsity(eta, sizes, 1e-6));
}

TEST_CASE("ARI: identity, symmetry, relabeling, null distribution, degenerate") {
  std::vector<int> a{0, 0, 1, 1, 2, 2};
  CHECK(ari(a, a) == doctest::Approx(1.0));
  std::vector<int> renamed{5, 5, 9, 9, 7, 7};
  CHECK(ari(a, renamed) == doctest::Approx(1.0));

  std::vector<int> b{0, 1, 0, 1, 0, 1};
  CHECK(ari(a, b) == doctest::Approx(ari(b, a)).epsilon(1e-12));

  // independent random partitions stay near zero
  Rng rng(17);
  std::uniform_int_distribution<int> lab(0, 3);
  double worst = 0;
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<int> x(200), y(200);
    for (int i = 0; i < 200; ++i) {
      x[i] = lab(rng);
      y[i] = lab(rng);
    }
    worst = std::max(worst, std::abs(ari(x, y)));
  }
  CHECK(worst <= 0.1);

  std::vector<int> ones(10, 1);
  CHECK(ari(ones, ones) == 1.0);
  CHECK_THROWS(ari({0}, {0}));
  CHECK_THROWS(ari({0, 1}, {0}));
}

TEST_CASE("pairwise distances are symmetric with zero diagonal") {
  std::vector<std::vector<double>> v{{0, 0}, {3, 4}, {1, 1}};
  auto d = pairwise_distances(v);
  CHECK(d[0][0] == 0.0);
  CHECK(d[0][1] == doctest::Approx(5.0));
  CHECK(d[1][0] == d[0][1]);
  CHECK(d[2][2] == 0.0);
}

TEST_CASE("cluster distance map matches a hand computation") {
  // domain 0: (0,0), (2,0); domain 1: (10,0), (14,0)
  // d(0,0)=2, d(1,1)=4, d(0,1)=mean(10,14,8,12)=11
  // off-diag = log(11 / sqrt(2*4)) = log(11/sqrt(8))
  std::vector<std::vector<double>> v{{0, 0}, {2, 0}, {10, 0}, {14, 0}};
  std::vector<int> dom{0, 0, 1, 1};
  auto map = cluster_distance_map(v, dom);
  double expect = std::log(11.0 / std::sqrt(8.0));
  CHECK(map[0][0] == 0.0);
  CHECK(map[1][1] == 0.0);
  CHECK(map[0][1] == doctest::Approx(expect).epsilon(1e-9));
  CHECK(map[1][0] == doctest::Approx(expect).epsilon(1e-9));

  // scaling all vectors leaves every block unchanged
  auto scaled = v;
  for (auto& p : scaled)
    for (auto& x : p) x *= 7.3;
  auto map2 = cluster_distance_map(scaled, dom);
  CHECK(map2[0][1] == doctest::Approx(map[0][1]).epsilon(1e-9));

  // identical vectors within domains: within-domain distance is floored, so
  // the off-diagonal blows up and gets clamped at the cap
  std::vector<std::vector<double>> degen{{0, 0}, {0, 0}, {5, 5}, {5, 5}};
  auto capped = cluster_distance_map(degen, dom, 20.0);
  CHECK(capped[0][1] == 20.0);
  CHECK(capped[1][0] == 20.0);

  CHECK_THROWS(cluster_distance_map({{0.0}, {1.0}}, {0, 1}));  // 1 client per domain
}

TEST_CASE("spectral clustering separates blobs and is deterministic") {
  Rng rng(23);
  std::normal_distribution<double> gauss(0.0, 0.2);
  std::vector<std::vector<double>> pts;
  std::vector<int> truth;
  for (int i = 0; i < 15; ++i) {
    pts.push_back({gauss(rng), gauss(rng)});
    truth.push_back(0);
  }
  for (int i = 0; i < 15; ++i) {
    pts.push_back({8.0 + gauss(rng), 8.0 + gauss(rng)});
    truth.push_back(1);
  }
  SpectralResult r = spectral_cluster(pts, 2, 5);
  CHECK(ari(r.labels, truth) == doctest::Approx(1.0));
  SpectralResult r2 = spectral_cluster(pts, 2, 5);
  CHECK(r2.labels == r.labels);

  SpectralResult one = spectral_cluster(pts, 1, 5);
  CHECK(std::set<int>(one.labels.begin(), one.labels.end()).size() == 1);
}

TEST_CASE("personalize_eval: strategy equivalences and e = 0") {
  GeneratedData g = small_world(51);
  ModelState theta_g = make_mlp(4, {6}, 3, true, 52);
  set_pretrained_stats(theta_g, g.pretrain_pool);

  EvalOptions opt;
  opt.epochs = 2;
  opt.repeats = 2;
  opt.base_lr = 1e-3;
  opt.seed = 53;

  // FT-BN-C == FedL2P with beta forced to 1 and uniform eta = base_lr
  MetaParams beta1 = forced_meta(theta_g, 5.0, opt.base_lr);
  EvalReport ft_c = personalize_eval(theta_g, g.clients, Strategy::FtBnC, nullptr, opt);
  EvalReport fed1 = personalize_eval(theta_g, g.clients, Strategy::FedL2P, &beta1, opt);
  REQUIRE(ft_c.clients.size() == fed1.clients.size());
  for (std::size_t i = 0; i < ft_c.clients.size(); ++i)
    CHECK(ft_c.clients[i].acc == fed1.clients[i].acc);

  // FT-BN-G == FedL2P with beta forced to 0
  MetaParams beta0 = forced_meta(theta_g, -5.0, opt.base_lr);
  EvalReport ft_g = personalize_eval(theta_g, g.clients, Strategy::FtBnG, nullptr, opt);
  EvalReport fed0 = personalize_eval(theta_g, g.clients, Strategy::FedL2P, &beta0, opt);
  for (std::size_t i = 0; i < ft_g.clients.size(); ++i)
    CHECK(ft_g.clients[i].acc == fed0.clients[i].acc);

  // e = 0: every strategy scores the unadapted model under its BN mode;
  // Global and FedL2P-with-beta=0 coincide
  EvalOptions zero = opt;
  zero.epochs = 0;
  EvalReport g0 = personalize_eval(theta_g, g.clients, Strategy::FtBnG, nullptr, zero);
  EvalReport f0 = personalize_eval(theta_g, g.clients, Strategy::FedL2P, &beta0, zero);
  CHECK(g0.mean_acc == doctest::Approx(f0.mean_acc).epsilon(1e-12));
  CHECK(g0.sd_acc == doctest::Approx(0.0).epsilon(1e-15));  // repeats identical at e=0

  // accuracies live in [0,1] and SD covers the configured repeat count
  for (const auto& c : g0.clients) {
    CHECK(c.acc.size() == 2);
    for (double a : c.acc) CHECK((a >= 0.0 && a <= 1.0));
  }
}

TEST_CASE("l2p_local with zero budget returns the initial lambda") {
  GeneratedData g = small_world(61);
  ModelState theta_g = make_mlp(4, {6}, 3, true, 62);
  set_pretrained_stats(theta_g, g.pretrain_pool);
  FLConfig cfg;
  cfg.num_clients = 1;
  cfg.seed = 63;
  MetaParams init = init_meta(theta_g.param_layer_count(), theta_g.bn_count(),
                              cfg.base_lr, derive_seed(cfg.seed, "meta_init"));
  MetaParams out = l2p_local(theta_g, g.clients[0], 0, cfg);
  CHECK(flatten_meta(out) == flatten_meta(init));
}

TEST_CASE("eval reports round-trip through JSON") {
  EvalReport r;
  r.strategy = "fedl2p";
  r.mean_acc = 0.875;
  r.sd_acc = 0.0125;
  r.clients.push_back({4, 1, {0.9, 0.85}, 0.875, 0.31, 0.5, false});
  r.clients.push_back({7, 2, {0.8, 0.8}, 0.8, 0.44, 1.0, true});
  std::string path = "eval_roundtrip_test.json";
  save_eval_report_json(r, path);
  EvalReport back = load_eval_report_json(path);
  CHECK(back.strategy == r.strategy);
  CHECK(back.mean_acc == r.mean_acc);
  CHECK(back.sd_acc == r.sd_acc);
  REQUIRE(back.clients.size() == 2);
  CHECK(back.clients[0].acc == r.clients[0].acc);
  CHECK(back.clients[1].diverged == true);
  CHECK(back.clients[1].sparsity == 1.0);
  std::remove(path.c_str());
}
