#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include "fedl2p/eval.hpp"
#include "fedl2p/federation.hpp"

using namespace fedl2p;

namespace {

GeneratedData tiny_world(int clients, std::uint64_t seed, double alpha = 1000.0) {
  DataGenSpec spec;
  spec.dims = 4;
  spec.classes = 3;
  spec.samples_per_client = 60;
  spec.clients = clients;
  spec.domains = std::min(clients, 2);
  spec.alpha = alpha;
  spec.pretrain_clients = 2;
  spec.pretrain_samples_per_client = 80;
  spec.seed = seed;
  return generate(spec);
}

ModelState tiny_pretrained(const GeneratedData& data, std::uint64_t seed) {
  ModelState m = make_mlp(4, {6}, 3, true, seed);
  set_pretrained_stats(m, data.pretrain_pool);
  return m;
}

}  // namespace

TEST_CASE("fedavg_aggregate: exactness, weighting, linearity") {
  CHECK(fedavg_aggregate({{{0.0}, 1.0}, {{2.0}, 1.0}})[0] == 1.0);
  CHECK(fedavg_aggregate({{{0.0}, 1.0}, {{4.0}, 3.0}})[0] == 3.0);
  CHECK(fedavg_aggregate({{{7.5}, 11.0}})[0] == 7.5);
  CHECK_THROWS(fedavg_aggregate({}));

  std::vector<std::pair<std::vector<double>, double>> items{
      {{1.0, -2.0}, 2.0}, {{0.5, 4.0}, 5.0}};
  auto base = fedavg_aggregate(items);
  auto scaled_items = items;
  for (auto& [v, n] : scaled_items)
    for (auto& x : v) x *= 3.0;
  auto scaled = fedavg_aggregate(scaled_items);
  for (std::size_t i = 0; i < base.size(); ++i)
    CHECK(scaled[i] == doctest::Approx(3.0 * base[i]).epsilon(1e-15));

  // aggregate of identical vectors is that vector exactly
  auto same = fedavg_aggregate({{{0.1, 0.2}, 3.0}, {{0.1, 0.2}, 9.0}});
  CHECK(same == std::vector<double>{0.1, 0.2});
}

TEST_CASE("sample_clients: size, determinism, full coverage") {
  std::vector<int> all = sample_clients(12, 1.0, 5, 1);
  CHECK(all.size() == 12);
  std::set<int> uniq(all.begin(), all.end());
  CHECK(uniq.size() == 12);

  std::vector<int> s1 = sample_clients(250, 0.1, 7, 3);
  CHECK(s1.size() == 25);
  CHECK(std::set<int>(s1.begin(), s1.end()).size() == 25);
  CHECK(s1 == sample_clients(250, 0.1, 7, 3));
  CHECK(s1 != sample_clients(250, 0.1, 7, 4));
  CHECK(std::is_sorted(s1.begin(), s1.end()));
}

TEST_CASE("meta_iters = 0 leaves lambda untouched") {
  GeneratedData data = tiny_world(3, 11);
  ModelState theta_g = tiny_pretrained(data, 12);
  FLConfig cfg;
  cfg.num_clients = 3;
  cfg.fraction = 1.0;
  cfg.rounds = 2;
  cfg.local_epochs = 1;
  cfg.meta_iters = 0;
  cfg.seed = 13;
  MetaParams init = init_meta(theta_g.param_layer_count(), theta_g.bn_count(),
                              cfg.base_lr, derive_seed(cfg.seed, "meta_init"));
  FedL2PResult res = run_fedl2p(theta_g, data.clients, cfg);
  CHECK(flatten_meta(res.final_lambda) == flatten_meta(init));
}

TEST_CASE("C=1 r=1 federation is step-identical to the local meta loop") {
  GeneratedData data = tiny_world(1, 21);
  ModelState theta_g = tiny_pretrained(data, 22);
  FLConfig cfg;
  cfg.num_clients = 1;
  cfg.fraction = 1.0;
  cfg.rounds = 4;
  cfg.local_epochs = 2;
  cfg.seed = 23;

  FedL2PResult fed = run_fedl2p(theta_g, data.clients, cfg);
  MetaParams local = l2p_local(theta_g, data.clients[0], cfg.rounds, cfg);
  CHECK(flatten_meta(fed.final_lambda) == flatten_meta(local));
}

TEST_CASE("runs are bit-reproducible and checkpoint dominates every round") {
  GeneratedData data = tiny_world(4, 31);
  ModelState theta_g = tiny_pretrained(data, 32);
  FLConfig cfg;
  cfg.num_clients = 4;
  cfg.fraction = 0.5;
  cfg.rounds = 3;
  cfg.local_epochs = 1;
  cfg.seed = 33;

  FedL2PResult a = run_fedl2p(theta_g, data.clients, cfg);
  FedL2PResult b = run_fedl2p(theta_g, data.clients, cfg);
  CHECK(flatten_meta(a.final_lambda) == flatten_meta(b.final_lambda));
  CHECK(flatten_meta(a.best_lambda) == flatten_meta(b.best_lambda));
  REQUIRE(a.records.size() == b.records.size());
  for (std::size_t i = 0; i < a.records.size(); ++i)
    CHECK(a.records[i].lambda_checksum == b.records[i].lambda_checksum);

  // parallel scheduling must not change the result
  FLConfig par = cfg;
  par.parallelism = 4;
  FedL2PResult c = run_fedl2p(theta_g, data.clients, par);
  CHECK(flatten_meta(c.final_lambda) == flatten_meta(a.final_lambda));

  for (const auto& r : a.records) {
    CHECK(int(r.clients.size()) == 2);  // ceil(4 * 0.5)
    if (std::isfinite(r.mean_val_loss)) CHECK(a.best_val_loss <= r.mean_val_loss + 1e-15);
  }
}

TEST_CASE("pretraining beats the majority class and centralizes at one client") {
  GeneratedData data = tiny_world(4, 41);
  ModelState init = make_mlp(4, {6}, 3, true, 42);

  std::vector<DataSet> shards{data.pretrain_pool};
  PretrainConfig cfg;
  cfg.rounds = 20;
  cfg.lr = 0.05;
  cfg.seed = 43;
  ModelState theta_g = pretrain_fedavg(init, shards, cfg);

  // held-out accuracy above the majority-class share
  DataSet held;
  {
    DataGenSpec spec;
    spec.dims = 4;
    spec.classes = 3;
    spec.clients = 1;
    spec.domains = 1;
    spec.samples_per_client = 300;
    spec.pretrain_clients = 1;
    spec.pretrain_samples_per_client = 300;
    spec.seed = 999;
    held = generate(spec).pretrain_pool;
  }
  std::vector<int> counts(3, 0);
  for (int y : held.y) ++counts[y];
  double majority = double(*std::max_element(counts.begin(), counts.end())) /
                    double(held.size());
  Tensor logits = forward(theta_g, held.x, BNMode::incoming());
  CHECK(accuracy(logits, held.y) > majority);

  // single shard: each round is exactly one local finetune pass
  GroupMap map = group_map(init);
  ModelState manual = init;
  PretrainConfig one;
  one.rounds = 3;
  one.lr = 0.05;
  one.seed = 43;
  ModelState fed = pretrain_fedavg(init, shards, one);
  for (int t = 1; t <= 3; ++t) {
    FinetuneOptions opt;
    opt.epochs = 1;
    opt.batch_size = std::size_t(one.batch_size);
    opt.seed = derive_seed(one.seed, "pretrain", std::uint64_t(t), 0);
    std::vector<double> eta(map.groups.size(), one.lr);
    manual = finetune(manual, shards[0], BNMode::incoming(), eta, opt).model;
  }
  CHECK(flatten(fed).data == flatten(manual).data);
}

TEST_CASE("round records stream to CSV") {
  RoundRecord r;
  r.round = 1;
  r.clients = {{0, 0.5, 48, false}, {2, 0.7, 48, true}};
  r.mean_val_loss = 0.5;
  std::string path = "rounds_test.csv";
  write_round_records_csv(path, {r});
  std::ifstream f(path);
  std::string header, line1, line2;
  std::getline(f, header);
  std::getline(f, line1);
  std::getline(f, line2);
  CHECK(header == "round,client_id,val_loss,n_samples,diverged");
  CHECK(line1.substr(0, 4) == "1,0,");
  CHECK(line2.back() == '1');
  std::remove(path.c_str());
}
