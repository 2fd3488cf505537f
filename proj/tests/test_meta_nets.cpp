#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "fedl2p/meta_nets.hpp"
#include "fedl2p/rng.hpp"

using namespace fedl2p;

namespace {

// tiny hand-controllable net: out = w3 * relu(w2 * relu(w1*x + b1) + b2) + b3
MetaParams passthrough_meta(std::size_t m_layers, std::size_t b_layers,
                            double bn_raw, double lr_raw, double eta_tilde) {
  MetaParams mp = init_meta(m_layers, b_layers, eta_tilde, 777, 4);
  auto force = [](Mlp3& net, double value) {
    std::fill(net.w3.begin(), net.w3.end(), 0.0);
    std::fill(net.b3.begin(), net.b3.end(), value);
  };
  force(mp.bn_net, bn_raw);
  force(mp.lr_net, lr_raw);
  std::fill(mp.eta_tilde.begin(), mp.eta_tilde.end(), eta_tilde);
  return mp;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

TEST_CASE("initialization lands near the designed fixed point") {
  MetaParams mp = init_meta(3, 2, 1e-3, 5);
  CHECK(mp.eta_tilde == std::vector<double>(6, 1e-3));

  // zero input: only the bias path is active, so outputs sit near 0.5 / 1.0
  std::vector<double> beta = bnnet_forward(mp, {0.0, 0.0});
  for (double b : beta) CHECK(std::abs(b - 0.5) <= 0.2);
  LrNetOut lr = lrnet_forward(mp, std::vector<double>(6, 0.0));
  for (double e : lr.eta) CHECK(e == doctest::Approx(1e-3).epsilon(0.25));

  // sanity band for small inputs: deviations from the fixed point stay small
  // on average (individual output coordinates can sit a few sigma out).
  Rng rng(6);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  double beta_sq = 0.0, raw_sq = 0.0;
  int beta_n = 0, raw_n = 0;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> xi{std::abs(u(rng)), std::abs(u(rng))};
    for (double b : bnnet_forward(mp, xi)) {
      CHECK(std::abs(b - 0.5) <= 0.6);
      beta_sq += (b - 0.5) * (b - 0.5);
      ++beta_n;
    }
    std::vector<double> stats(6);
    for (auto& s : stats) s = u(rng);
    LrNetOut out = lrnet_forward(mp, stats);
    for (double r : out.raw_clamped) {
      CHECK(std::abs(r - 1.0) <= 0.6);
      raw_sq += (r - 1.0) * (r - 1.0);
      ++raw_n;
    }
  }
  CHECK(std::sqrt(beta_sq / beta_n) <= 0.2);
  CHECK(std::sqrt(raw_sq / raw_n) <= 0.2);

  MetaParams again = init_meta(3, 2, 1e-3, 5);
  CHECK(flatten_meta(again) == flatten_meta(mp));
}

TEST_CASE("clamp boundaries and interior points") {
  MetaParams low = passthrough_meta(2, 1, -0.2, 1.0, 1e-3);
  CHECK(bnnet_forward(low, {0.3}) == std::vector<double>{0.0});

  MetaParams mid = passthrough_meta(2, 1, 0.7, 1.0, 1e-3);
  CHECK(bnnet_forward(mid, {0.3})[0] == doctest::Approx(0.7).epsilon(1e-12));

  MetaParams big = passthrough_meta(2, 1, 0.5, 1500.0, 1e-3);
  LrNetOut lr = lrnet_forward(big, std::vector<double>(4, 0.1));
  for (std::size_t k = 0; k < lr.eta.size(); ++k) {
    CHECK(lr.raw_clamped[k] == 1000.0);
    CHECK(lr.eta[k] == doctest::Approx(1.0).epsilon(1e-12));  // 1000 * 1e-3
  }
}

TEST_CASE("eta_tilde = 0 silences LRNet output") {
  MetaParams mp = passthrough_meta(2, 1, 0.5, 3.0, 0.0);
  LrNetOut lr = lrnet_forward(mp, std::vector<double>(4, 0.7));
  for (double e : lr.eta) CHECK(e == 0.0);
}

TEST_CASE("straight-through estimator: clamped output keeps the unclamped gradient") {
  // same weights, one net saturating the clamp and one interior; only b3 differs,
  // so parameter gradients must be identical under STE
  MetaParams sat = passthrough_meta(2, 1, -0.2, 1.0, 1e-3);
  MetaParams interior = passthrough_meta(2, 1, 0.4, 1.0, 1e-3);
  // make the first-layer path nontrivial
  Rng rng(9);
  std::normal_distribution<double> gauss(0.0, 0.05);
  for (std::size_t i = 0; i < sat.bn_net.w1.size(); ++i) {
    double v = gauss(rng);
    sat.bn_net.w1[i] = v;
    interior.bn_net.w1[i] = v;
  }
  std::vector<double> xi{0.8};
  Mlp3Cache cs, ci;
  bnnet_forward(sat, xi, &cs);
  bnnet_forward(interior, xi, &ci);
  Mlp3Grad gs = mlp3_vjp(sat.bn_net, cs, xi, {1.0});
  Mlp3Grad gi = mlp3_vjp(interior.bn_net, ci, xi, {1.0});
  CHECK(gs.w1 == gi.w1);
  CHECK(gs.w2 == gi.w2);
  CHECK(gs.b3 == gi.b3);
}

TEST_CASE("zero upstream gives zero gradients") {
  MetaParams mp = init_meta(2, 2, 1e-3, 15, 6);
  std::vector<double> xi{0.1, 0.4};
  Mlp3Cache cache;
  bnnet_forward(mp, xi, &cache);
  Mlp3Grad g = mlp3_vjp(mp.bn_net, cache, xi, {0.0, 0.0});
  for (const auto* block : {&g.w1, &g.b1, &g.w2, &g.b2, &g.w3, &g.b3})
    for (double v : *block) CHECK(v == 0.0);
}

TEST_CASE("VJP matches finite differences at interior points") {
  MetaParams mp = init_meta(2, 2, 1e-3, 21, 8);
  std::vector<double> xi{0.2, 0.6};
  std::vector<double> upstream{0.7, -1.3};

  Mlp3Cache cache;
  std::vector<double> out = bnnet_forward(mp, xi, &cache);
  for (double b : out) REQUIRE((b > 1e-3 && b < 1 - 1e-3));  // away from clamps
  Mlp3Grad g = mlp3_vjp(mp.bn_net, cache, xi, upstream);

  std::vector<double> flat = flatten_mlp3(mp.bn_net);
  std::vector<double> analytic;
  for (const auto* block : {&g.w1, &g.b1, &g.w2, &g.b2, &g.w3, &g.b3})
    analytic.insert(analytic.end(), block->begin(), block->end());

  double h = 1e-6;
  for (std::size_t j = 0; j < flat.size(); j += 5) {
    auto eval = [&](double delta) {
      std::vector<double> pert = flat;
      pert[j] += delta;
      Mlp3 net = mp.bn_net;
      std::size_t off = 0;
      unflatten_mlp3(pert, off, net);
      MetaParams alt = mp;
      alt.bn_net = net;
      return dot(upstream, bnnet_forward(alt, xi));
    };
    double fd = (eval(h) - eval(-h)) / (2 * h);
    double denom = std::max(std::abs(fd), 1e-6);
    CHECK(std::abs(analytic[j] - fd) / denom < 1e-4);
  }
}

TEST_CASE("eta_tilde gradient is upstream times the clamped raw output") {
  // product rule on eta = clamp(raw) * eta_tilde
  MetaParams mp = passthrough_meta(2, 1, 0.5, 2.5, 1e-3);
  LrNetOut lr = lrnet_forward(mp, std::vector<double>(4, 0.3));
  std::vector<double> upstream{0.4, -0.2, 1.0, 0.0};
  for (std::size_t k = 0; k < lr.eta.size(); ++k) {
    double grad_eta_tilde = upstream[k] * lr.raw_clamped[k];
    CHECK(grad_eta_tilde == doctest::Approx(upstream[k] * 2.5).epsilon(1e-12));
  }
}

TEST_CASE("meta parameter checkpoints round-trip losslessly") {
  MetaParams mp = init_meta(3, 2, 1e-3, 33, 10);
  mp.eta_tilde[1] = -4.2e-7;  // negative rates must survive
  std::string path = "meta_roundtrip_test.json";
  save_meta(mp, path);
  MetaParams back = load_meta(path);
  CHECK(flatten_meta(back) == flatten_meta(mp));
  CHECK(back.bn_net.in == mp.bn_net.in);
  CHECK(back.lr_net.out == mp.lr_net.out);
  std::remove(path.c_str());
}
