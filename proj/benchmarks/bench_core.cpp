#include <benchmark/benchmark.h>

#include <vector>

#include "fedl2p/data_gen.hpp"
#include "fedl2p/hypergrad.hpp"
#include "fedl2p/meta_nets.hpp"
#include "fedl2p/model.hpp"
#include "fedl2p/profile.hpp"

namespace {

using namespace fedl2p;

struct Fixture {
  ModelState model;
  DataSet data;
  explicit Fixture(std::size_t n)
      : model(make_mlp(16, {32, 32}, 4, true, 3)) {
    DataGenSpec spec;
    spec.dims = 16;
    spec.classes = 4;
    spec.samples_per_client = n;
    spec.clients = 1;
    spec.domains = 1;
    spec.seed = 7;
    GeneratedData g = generate(spec);
    data = g.clients[0].train;
    set_pretrained_stats(model, data);
  }
};

void BM_Forward(benchmark::State& state) {
  Fixture f(std::size_t(state.range(0)));
  for (auto _ : state) {
    Tensor logits = forward(f.model, f.data.x, BNMode::global());
    benchmark::DoNotOptimize(logits.data.data());
  }
  state.SetItemsProcessed(state.iterations() * f.data.x.rows);
}

void BM_Grad(benchmark::State& state) {
  Fixture f(std::size_t(state.range(0)));
  for (auto _ : state) {
    LossGrad g = grad(f.model, f.data.x, f.data.y, BNMode::global());
    benchmark::DoNotOptimize(g.loss);
  }
  state.SetItemsProcessed(state.iterations() * f.data.x.rows);
}

void BM_Finetune(benchmark::State& state) {
  Fixture f(400);
  std::vector<double> eta(group_map(f.model).groups.size(), 1e-3);
  FinetuneOptions opt;
  opt.epochs = std::size_t(state.range(0));
  opt.seed = 11;
  for (auto _ : state) {
    FinetuneResult r = finetune(f.model, f.data, BNMode::global(), eta, opt);
    benchmark::DoNotOptimize(r.final_loss);
  }
}

void BM_Neumann(benchmark::State& state) {
  Fixture f(400);
  LossGrad g0 = grad(f.model, f.data.x, f.data.y, BNMode::global());
  ModelState m = f.model;
  DataSet d = f.data;
  HypergradConfig hg;
  GradFn grad_at = [&](const ParamVector& theta) {
    return grad(with_params(m, theta), d.x, d.y, BNMode::global()).grad;
  };
  ParamVector theta0 = flatten(m);
  auto hvp_fn = [&](const ParamVector& v) {
    return hvp(theta0, v, grad_at, hg.hvp_step);
  };
  for (auto _ : state) {
    ParamVector p =
        neumann_inverse_hvp(g0.grad, hvp_fn, hg.neumann_lr, int(state.range(0)));
    benchmark::DoNotOptimize(p.data.data());
  }
}

void BM_Profile(benchmark::State& state) {
  Fixture f(std::size_t(state.range(0)));
  for (auto _ : state) {
    ModelState m = f.model;
    ClientProfile p = build_profile(m, f.data);
    benchmark::DoNotOptimize(p.xi.data());
  }
}

void BM_MetaForward(benchmark::State& state) {
  std::size_t m_layers = std::size_t(state.range(0));
  MetaParams mp = init_meta(m_layers, 4, 1e-3, 5);
  std::vector<double> xi(4, 0.3);
  std::vector<double> stats(2 * m_layers, 0.1);
  for (auto _ : state) {
    std::vector<double> beta = bnnet_forward(mp, xi);
    LrNetOut lr = lrnet_forward(mp, stats);
    benchmark::DoNotOptimize(beta.data());
    benchmark::DoNotOptimize(lr.eta.data());
  }
}

BENCHMARK(BM_Forward)->Arg(64)->Arg(256)->Arg(1024);
BENCHMARK(BM_Grad)->Arg(64)->Arg(256)->Arg(1024);
BENCHMARK(BM_Finetune)->Arg(1)->Arg(5)->Arg(15);
BENCHMARK(BM_Neumann)->Arg(1)->Arg(3)->Arg(10);
BENCHMARK(BM_Profile)->Arg(64)->Arg(512);
BENCHMARK(BM_MetaForward)->Arg(8)->Arg(64);

}  // namespace

BENCHMARK_MAIN();
