#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "fedl2p/model.hpp"
#include "fedl2p/profile.hpp"
#include "fedl2p/rng.hpp"

using namespace fedl2p;

namespace {

DataSet gaussian_dataset(std::size_t n, std::size_t d, double mean, double sd,
                         std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> gauss(mean, sd);
  DataSet ds;
  ds.x = Tensor(n, d);
  for (auto& v : ds.x.data) v = gauss(rng);
  ds.y.assign(n, 0);
  return ds;
}

}  // namespace

TEST_CASE("gaussian symmetric KL closed-form values") {
  CHECK(gaussian_sym_kl(0.0, 1.0, 0.0, 1.0) == 0.0);
  // KL(N(1,1)||N(0,1)) = 0.5 both ways -> symmetric KL 0.5
  CHECK(gaussian_sym_kl(1.0, 1.0, 0.0, 1.0) == doctest::Approx(0.5).epsilon(1e-9));
  // 0.5*(0.80685 + 0.31815) = 0.56250 for (0,4) vs (0,1)
  CHECK(gaussian_sym_kl(0.0, 4.0, 0.0, 1.0) == doctest::Approx(0.56250).epsilon(1e-9));
}

TEST_CASE("symmetric KL properties on 1000 random pairs") {
  Rng rng(99);
  std::normal_distribution<double> mu(0.0, 3.0);
  std::uniform_real_distribution<double> var(0.01, 10.0);
  for (int i = 0; i < 1000; ++i) {
    double m1 = mu(rng), m2 = mu(rng), v1 = var(rng), v2 = var(rng);
    double a = gaussian_sym_kl(m1, v1, m2, v2);
    double b = gaussian_sym_kl(m2, v2, m1, v1);
    CHECK(a == doctest::Approx(b).epsilon(1e-12));
    CHECK(a >= 0.0);
  }
}

TEST_CASE("profile_xi is the channel mean and is monotone in mean offset") {
  std::vector<double> mu_c{1.0, 0.0}, var_c{1.0, 4.0};
  std::vector<double> mu_p{0.0, 0.0}, var_p{1.0, 1.0};
  // per-channel divergences 0.5 and 0.5625 -> mean 0.53125
  CHECK(profile_xi(mu_c, var_c, mu_p, var_p) ==
        doctest::Approx(0.53125).epsilon(1e-9));

  CHECK(profile_xi(mu_p, var_p, mu_p, var_p) == 0.0);

  double prev = 0.0;
  for (double offset : {0.5, 1.0, 2.0, 4.0}) {
    double xi = profile_xi({offset, 0.0}, var_p, mu_p, var_p);
    CHECK(xi > prev);
    prev = xi;
  }

  CHECK_THROWS(profile_xi({0.0}, {1.0, 1.0}, {0.0}, {1.0}));
}

TEST_CASE("build_profile: determinism, shuffle invariance, shapes") {
  ModelState m = make_mlp(4, {6, 5}, 3, true, 7);
  DataSet d = gaussian_dataset(60, 4, 0.0, 1.0, 8);

  ModelState m1 = m, m2 = m;
  ClientProfile p1 = build_profile(m1, d);
  ClientProfile p2 = build_profile(m2, d);
  CHECK(p1.xi == p2.xi);
  CHECK(p1.feat_stats == p2.feat_stats);
  CHECK(p1.xi.size() == m.bn_count());
  CHECK(p1.feat_stats.size() == 2 * m.param_layer_count());
  CHECK(p1.n_samples == 60);
  for (double v : p1.xi) CHECK(v >= 0.0);
  for (std::size_t i = 1; i < p1.feat_stats.size(); i += 2)
    CHECK(p1.feat_stats[i] >= 0.0);  // SD entries

  // shuffled rows give identical full-dataset statistics
  std::vector<std::size_t> idx(d.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = idx.size() - 1 - i;
  DataSet shuffled = subset(d, idx);
  ModelState m3 = m;
  ClientProfile p3 = build_profile(m3, shuffled);
  for (std::size_t b = 0; b < p1.xi.size(); ++b)
    CHECK(p3.xi[b] == doctest::Approx(p1.xi[b]).epsilon(1e-9));

  DataSet empty;
  ModelState m4 = m;
  CHECK_THROWS(build_profile(m4, empty));
}

TEST_CASE("in-distribution data yields small xi; shifted data inflates the first layer") {
  ModelState m = make_mlp(4, {6}, 3, true, 17);
  // establish pretrained stats from a reference pool
  DataSet pool = gaussian_dataset(4000, 4, 0.0, 1.0, 18);
  set_pretrained_stats(m, pool);

  // Monte-Carlo noise bound from held-out in-distribution resamples
  // the bound is twice the worst value over 20 resamples, which dominates a
  // further in-distribution draw with high probability
  double noise_bound = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    ModelState mt = m;
    ClientProfile p = build_profile(mt, gaussian_dataset(200, 4, 0.0, 1.0, 100 + trial));
    noise_bound = std::max(noise_bound, *std::max_element(p.xi.begin(), p.xi.end()));
  }
  noise_bound *= 2.0;

  ModelState mi = m, ms = m;
  ClientProfile in_dist = build_profile(mi, gaussian_dataset(200, 4, 0.0, 1.0, 55));
  ClientProfile shifted = build_profile(ms, gaussian_dataset(200, 4, 3.0, 1.0, 55));
  for (double v : in_dist.xi) CHECK(v <= noise_bound * 1.0001);
  CHECK(shifted.xi[0] > in_dist.xi[0]);
  CHECK(shifted.xi[0] > noise_bound);
}

TEST_CASE("input scaling propagates proportionally into layer-0 feature stats") {
  // linear first layer: stats of the raw input are the layer-0 profile entries
  ModelState m = make_mlp(3, {4}, 2, false, 27);
  DataSet d = gaussian_dataset(80, 3, 0.5, 1.5, 28);
  DataSet scaled = d;
  for (auto& v : scaled.x.data) v *= 3.0;

  ModelState m1 = m, m2 = m;
  ClientProfile p = build_profile(m1, d);
  ClientProfile ps = build_profile(m2, scaled);
  CHECK(ps.feat_stats[0] == doctest::Approx(3.0 * p.feat_stats[0]).epsilon(1e-9));
  CHECK(ps.feat_stats[1] == doctest::Approx(3.0 * p.feat_stats[1]).epsilon(1e-9));
}

TEST_CASE("profiles export as CSV rows") {
  ModelState m = make_mlp(3, {4, 4}, 2, true, 37);
  DataSet d = gaussian_dataset(40, 3, 0.0, 1.0, 38);
  ModelState mc = m;
  ClientProfile p = build_profile(mc, d);
  std::string path = "profiles_test.csv";
  export_profiles_csv(path, {{3, p}, {9, p}});
  std::ifstream f(path);
  std::string header;
  std::getline(f, header);
  CHECK(header == "client_id,b,xi");
  int rows = 0;
  for (std::string line; std::getline(f, line);) ++rows;
  CHECK(rows == int(2 * p.xi.size()));
  std::remove(path.c_str());
}
